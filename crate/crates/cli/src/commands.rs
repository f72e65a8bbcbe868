//! Subcommand arguments and their implementations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use reatt::adaptation::{adapt_ir, adapt_unsupervised, ir_examples, mine_ssm, write_jsonl};
use reatt::corpus::{
    make_queries, read_records, write_records, Bm25Index, Bm25Params, Corpus, Query, Record,
    Vocabulary, DEFAULT_MAX_DOC_LEN, DEFAULT_MAX_QUERY_LEN,
};
use reatt::eval::{
    exact_match, make_synthetic, make_two_topic, ndcg_at_10, recall_at_k, recall_at_k_qrels, Judge,
    Qrels, Run,
};
use reatt::index::{build_index, TokenIndex};
use reatt::model::Model;
use reatt::scoring::{head_relevance, probe_heads, write_probe_report, ProbeQuery};
use reatt::training::{generate_answers, retrieval_run, run_training, QaPair, TrainData, TrainOutcome};
use serde::Serialize;

use crate::config::{read_toml, AdaptFile, TrainFile};
use crate::error::{CliError, CliResult, FieldContext};
use crate::manifest::{dir_of, ManifestBuilder};

pub const VOCAB_FILE: &str = "vocab.txt";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let body = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

/// The checkpoint plus its vocabulary, by default the `vocab.txt` next to
/// the checkpoint.
fn load_model(ckpt: &Path, vocab: Option<&Path>) -> CliResult<(Model, Vocabulary, PathBuf)> {
    let model = Model::load(ckpt).field("ckpt")?;
    let vocab_path = vocab.map_or_else(|| dir_of(ckpt).join(VOCAB_FILE), Path::to_path_buf);
    let v = Vocabulary::load(&vocab_path).field("vocab")?;
    if v.len() != model.config().vocab_size {
        return Err(CliError::Data(format!(
            "vocab: {} holds {} tokens but the checkpoint expects {}",
            vocab_path.display(),
            v.len(),
            model.config().vocab_size
        )));
    }
    Ok((model, v, vocab_path))
}

fn corpus_for(model: &Model, records: &[Record], vocab: &Vocabulary) -> CliResult<Corpus> {
    Corpus::from_records(records, vocab, model.config().max_doc_len).field("corpus")
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Key-value lookup with one gold document per query.
    KeyValue,
    /// Two-topic biographies for masked-entity adaptation.
    TwoTopic,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub docs: usize,
    #[arg(long, default_value_t = 200)]
    pub queries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of documents that also carry the query template words.
    #[arg(long, default_value_t = 0.3)]
    pub distractor: f64,
    #[arg(long, value_enum, default_value_t = SynthKind::KeyValue)]
    pub kind: SynthKind,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("synth", args);
    manifest.seed(args.seed);
    match args.kind {
        SynthKind::KeyValue => {
            if args.queries > args.docs {
                return Err(CliError::Usage(format!(
                    "--queries {} exceeds --docs {}",
                    args.queries, args.docs
                )));
            }
            if !(0.0..=1.0).contains(&args.distractor) {
                return Err(CliError::Usage("--distractor must lie in [0, 1]".into()));
            }
            let task = make_synthetic(args.docs, args.queries, args.distractor, args.seed);
            task.write(&args.out)?;
            log::info!(
                "wrote {} documents and {} queries (vocabulary {})",
                task.docs.len(),
                task.queries.len(),
                task.vocab_size()
            );
        }
        SynthKind::TwoTopic => {
            let task = make_two_topic(args.docs, args.seed);
            create_dir(&args.out)?;
            write_records(&args.out.join("corpus.jsonl"), &task.docs)?;
            log::info!("wrote {} two-topic documents", task.docs.len());
        }
    }
    manifest.write(&args.out)?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Query files whose text and answers join the vocabulary.
    #[arg(long)]
    pub queries: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_DOC_LEN)]
    pub max_doc_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct IngestStats {
    documents: usize,
    tokens: usize,
    vocab_size: usize,
    truncated_documents: usize,
}

fn record_texts(records: &[Record]) -> impl Iterator<Item = &str> {
    records
        .iter()
        .flat_map(|r| std::iter::once(r.text.as_str()).chain(r.answers.iter().map(String::as_str)))
}

pub fn ingest(args: &IngestArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("ingest", args);
    let records = read_records(&args.corpus).field("corpus")?;
    manifest.input(&args.corpus);
    let mut extra = Vec::new();
    for q in &args.queries {
        extra.extend(read_records(q).field("queries")?);
        manifest.input(q);
    }
    let mut vocab = Vocabulary::build(records.iter().map(|r| r.text.as_str()));
    for t in record_texts(&extra) {
        vocab.extend_from_text(t);
    }
    let corpus = Corpus::from_records(&records, &vocab, args.max_doc_len).field("corpus")?;
    let truncated = records
        .iter()
        .filter(|r| vocab.tokenize(&r.text).len() > args.max_doc_len)
        .count();
    create_dir(&args.out)?;
    vocab.save(&args.out.join(VOCAB_FILE))?;
    let stats = IngestStats {
        documents: corpus.len(),
        tokens: corpus.total_tokens(),
        vocab_size: vocab.len(),
        truncated_documents: truncated,
    };
    write_json(&args.out.join("stats.json"), &stats)?;
    log::info!("{} documents, {} tokens, vocabulary {}", stats.documents, stats.tokens, stats.vocab_size);
    manifest.write(&args.out)?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct Bm25Args {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary to tokenize with; built from the corpus when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Queries to rank; writes `runs.tsv` when given.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value_t = 0.9)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.4)]
    pub b: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_DOC_LEN)]
    pub max_doc_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn bm25(args: &Bm25Args) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("bm25", args);
    let records = read_records(&args.corpus).field("corpus")?;
    manifest.input(&args.corpus);
    let vocab = match &args.vocab {
        Some(p) => {
            manifest.input(p);
            Vocabulary::load(p).field("vocab")?
        }
        None => Vocabulary::build(records.iter().map(|r| r.text.as_str())),
    };
    let corpus = Corpus::from_records(&records, &vocab, args.max_doc_len).field("corpus")?;
    let index = Bm25Index::build(&corpus, Bm25Params { k1: args.k1, b: args.b });
    create_dir(&args.out)?;
    index.save(&args.out.join("bm25.idx"))?;
    vocab.save(&args.out.join(VOCAB_FILE))?;
    if let Some(qpath) = &args.queries {
        let queries = make_queries(&read_records(qpath).field("queries")?, &vocab, DEFAULT_MAX_QUERY_LEN)
            .field("queries")?;
        manifest.input(qpath);
        let mut run = Run::default();
        for q in &queries {
            let hits = index
                .search(&q.tokens, args.k)
                .into_iter()
                .map(|(d, s)| (corpus.get(d).external_id.clone(), s))
                .collect();
            run.insert(&q.id, hits);
        }
        run.write(&args.out.join("runs.tsv"))?;
    }
    log::info!("indexed {} documents (avg length {:.1})", index.num_docs(), index.avg_doc_len());
    manifest.write(&args.out)?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Serialize)]
struct TrainSnapshot<'a> {
    config_file: &'a Path,
    config: &'a TrainFile,
}

fn qa_pairs(queries: &[Query], vocab: &Vocabulary, max_answer_len: usize, field: &'static str) -> CliResult<Vec<QaPair>> {
    queries
        .iter()
        .map(|q| {
            QaPair::from_query(q, vocab, max_answer_len).map_err(|e| {
                CliError::Data(format!("{field}: query `{}`: {e}", q.id))
            })
        })
        .collect()
}

fn write_outcome(out: &Path, outcome: &TrainOutcome, vocab: &Vocabulary, ckpt_name: &str) -> CliResult<()> {
    outcome.model.save(&out.join(ckpt_name))?;
    vocab.save(&out.join(VOCAB_FILE))?;
    write_json(&out.join("phases.json"), &outcome.phases)
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let file: TrainFile = read_toml(&args.config)?;
    let mut manifest = ManifestBuilder::new(
        "train",
        &TrainSnapshot {
            config_file: &args.config,
            config: &file,
        },
    );
    manifest.seed(file.train.seed).input(&args.config);

    let doc_records = read_records(&file.corpus).field("corpus")?;
    manifest.input(&file.corpus);
    let mut train_records = read_records(&file.train_queries).field("train_queries")?;
    manifest.input(&file.train_queries);
    let dev_records = match &file.dev_queries {
        Some(p) => {
            manifest.input(p);
            read_records(p).field("dev_queries")?
        }
        None => {
            if file.holdout >= train_records.len() {
                return Err(CliError::Data(format!(
                    "holdout: {} of {} training queries leaves nothing to train on",
                    file.holdout,
                    train_records.len()
                )));
            }
            train_records.split_off(train_records.len() - file.holdout)
        }
    };
    let dev_qrels = match &file.dev_qrels {
        Some(p) => {
            manifest.input(p);
            Some(Qrels::read(p).field("dev_qrels")?)
        }
        None => None,
    };

    let mut vocab = Vocabulary::build(doc_records.iter().map(|r| r.text.as_str()));
    for t in record_texts(&train_records).chain(record_texts(&dev_records)) {
        vocab.extend_from_text(t);
    }
    let mut model_cfg = file.model.clone();
    model_cfg.vocab_size = vocab.len();
    let model = Model::new(model_cfg.clone(), file.train.seed)?;
    let corpus = corpus_for(&model, &doc_records, &vocab)?;
    let train_queries = make_queries(&train_records, &vocab, model_cfg.max_query_len).field("train_queries")?;
    let dev = make_queries(&dev_records, &vocab, model_cfg.max_query_len).field("dev_queries")?;
    let pairs = qa_pairs(&train_queries, &vocab, model_cfg.max_answer_len, "train_queries")?;
    let bm25 = Bm25Index::build(&corpus, Bm25Params::default());
    let data = TrainData {
        corpus: &corpus,
        bm25: &bm25,
        train: &pairs,
        dev: &dev,
        dev_qrels: dev_qrels.as_ref(),
    };
    log::info!(
        "training on {} queries ({} dev) over {} documents, vocabulary {}",
        pairs.len(),
        dev.len(),
        corpus.len(),
        vocab.len()
    );
    let outcome = run_training(model, &data, &file.train, Some(&file.out))?;
    write_outcome(&file.out, &outcome, &vocab, "final.ckpt")?;
    for p in &outcome.phases {
        log::info!("{}: dev recall {:?}", p.phase, p.dev_recall);
    }
    manifest.write(&file.out)?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Index file to write.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn build_index_cmd(args: &BuildIndexArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("build-index", args);
    let (model, vocab, vocab_path) = load_model(&args.ckpt, args.vocab.as_deref())?;
    manifest.input(&args.ckpt).input(&vocab_path).input(&args.corpus);
    let records = read_records(&args.corpus).field("corpus")?;
    let corpus = corpus_for(&model, &records, &vocab)?;
    let index = build_index(&corpus, &model)?;
    create_dir(&dir_of(&args.out))?;
    index.save(&args.out)?;
    log::info!(
        "indexed {} token vectors of {} documents with head {}",
        index.num_rows(),
        index.num_docs(),
        index.head()
    );
    manifest.write(&dir_of(&args.out))?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Corpus the index was built from; maps rows back to document ids.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long = "kprime", default_value_t = 2048)]
    pub k_prime: usize,
    /// Run file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also writes greedy answers (`query_id<TAB>answer`) reading the top
    /// `--read-docs` documents.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub read_docs: usize,
}

fn write_predictions(path: &Path, queries: &[Query], answers: &[String]) -> CliResult<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for (q, a) in queries.iter().zip(answers) {
        writeln!(w, "{}\t{}", q.id, a.replace(['\t', '\n'], " ")).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn read_predictions(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = BTreeMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, answer) = line.split_once('\t').unwrap_or((line.as_str(), ""));
        out.insert(id.to_string(), answer.to_string());
    }
    Ok(out)
}

pub fn retrieve(args: &RetrieveArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("retrieve", args);
    let (model, vocab, vocab_path) = load_model(&args.ckpt, args.vocab.as_deref())?;
    manifest
        .input(&args.index)
        .input(&args.ckpt)
        .input(&vocab_path)
        .input(&args.corpus)
        .input(&args.queries);
    let index = TokenIndex::load(&args.index).field("index")?;
    let records = read_records(&args.corpus).field("corpus")?;
    let corpus = corpus_for(&model, &records, &vocab)?;
    if corpus.len() != index.num_docs() {
        return Err(CliError::Data(format!(
            "corpus: {} documents but the index covers {}",
            corpus.len(),
            index.num_docs()
        )));
    }
    let queries = make_queries(
        &read_records(&args.queries).field("queries")?,
        &vocab,
        model.config().max_query_len,
    )
    .field("queries")?;
    let run = retrieval_run(&model, &corpus, &index, &queries, args.k, args.k_prime).field("index")?;
    create_dir(&dir_of(&args.out))?;
    run.write(&args.out)?;
    if let Some(p) = &args.predictions {
        let max_len = model.config().max_answer_len;
        let answers = generate_answers(&model, &corpus, &vocab, &index, &queries, args.read_docs, args.k_prime, max_len)?;
        write_predictions(p, &queries, &answers)?;
    }
    log::info!("retrieved top {} for {} queries", args.k, queries.len());
    manifest.write(&dir_of(&args.out))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    /// Salient-span masking on the target corpus.
    Ssm,
    /// Generating relevance-prefixed documents from judged queries.
    Ir,
    /// Supervised question answering on the target corpus.
    Qa,
}

#[derive(Debug, Args, Serialize)]
pub struct AdaptArgs {
    #[arg(long, value_enum)]
    pub mode: AdaptMode,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// TOML file whose `[train]` table sets the optimization.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Queries (ir, qa).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Judgements (ir).
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// SSM examples to mine (ssm).
    #[arg(long, default_value_t = 1000)]
    pub examples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, mode: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--mode {mode} requires {flag}")))
}

pub fn adapt(args: &AdaptArgs) -> CliResult<()> {
    let config = match &args.config {
        Some(p) => read_toml::<AdaptFile>(p)?.train,
        None => AdaptFile::default().train,
    };
    #[derive(Serialize)]
    struct Snapshot<'a> {
        args: &'a AdaptArgs,
        train: &'a reatt::training::TrainConfig,
    }
    let mut manifest = ManifestBuilder::new(
        "adapt",
        &Snapshot {
            args,
            train: &config,
        },
    );
    manifest.seed(config.seed);
    if let Some(p) = &args.config {
        manifest.input(p);
    }
    let (model, vocab, vocab_path) = load_model(&args.ckpt, args.vocab.as_deref())?;
    manifest.input(&args.ckpt).input(&vocab_path).input(&args.corpus);
    let records = read_records(&args.corpus).field("corpus")?;
    let corpus = corpus_for(&model, &records, &vocab)?;
    create_dir(&args.out)?;

    let outcome = match args.mode {
        AdaptMode::Ssm => {
            let examples = mine_ssm(&corpus, args.examples, config.seed);
            log::info!("mined {} SSM examples", examples.len());
            write_jsonl(&args.out.join("ssm.jsonl"), &examples)?;
            adapt_unsupervised(model, &corpus, &vocab, &examples, &config, Some(&args.out))?
        }
        AdaptMode::Ir => {
            let qpath = required(&args.queries, "--queries", "ir")?;
            let rpath = required(&args.qrels, "--qrels", "ir")?;
            manifest.input(qpath).input(rpath);
            let texts: BTreeMap<String, String> = read_records(qpath)
                .field("queries")?
                .into_iter()
                .map(|r| (r.id, r.text))
                .collect();
            let qrels = Qrels::read(rpath).field("qrels")?;
            let examples = ir_examples(&texts, &qrels, &corpus, config.seed);
            log::info!("built {} IR examples", examples.len());
            write_jsonl(&args.out.join("ir.jsonl"), &examples)?;
            adapt_ir(model, &corpus, &vocab, &examples, &config, Some(&args.out))?
        }
        AdaptMode::Qa => {
            let qpath = required(&args.queries, "--queries", "qa")?;
            manifest.input(qpath);
            let cfg = model.config().clone();
            let queries = make_queries(&read_records(qpath).field("queries")?, &vocab, cfg.max_query_len)
                .field("queries")?;
            let pairs = qa_pairs(&queries, &vocab, cfg.max_answer_len, "queries")?;
            let bm25 = Bm25Index::build(&corpus, Bm25Params::default());
            let data = TrainData {
                corpus: &corpus,
                bm25: &bm25,
                train: &pairs,
                dev: &[],
                dev_qrels: None,
            };
            run_training(model, &data, &config, Some(&args.out))?
        }
    };
    write_outcome(&args.out, &outcome, &vocab, "adapted.ckpt")?;
    manifest.write(&args.out)?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// `r@k` (with `--k`), `r@<n>`, `em` or `ndcg@10`.
    #[arg(long)]
    pub metric: String,
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Graded judgements; R@k falls back to answer containment without them.
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Queries with gold answers (answer-containment R@k, EM).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Corpus for answer containment.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `query_id<TAB>answer` lines (EM).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Directory for `metrics.json` and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Recall(usize),
    ExactMatch,
    Ndcg10,
}

impl Metric {
    pub fn parse(s: &str, k: Option<usize>) -> CliResult<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "em" => Ok(Metric::ExactMatch),
            "ndcg@10" => Ok(Metric::Ndcg10),
            "r@k" => k
                .map(Metric::Recall)
                .ok_or_else(|| CliError::Usage("--metric r@k requires --k".into())),
            other => match other.strip_prefix("r@").map(str::parse::<usize>) {
                Some(Ok(n)) if n > 0 => Ok(Metric::Recall(n)),
                _ => Err(CliError::Usage(format!(
                    "unknown metric `{s}`; expected r@k, r@<n>, em or ndcg@10"
                ))),
            },
        }
    }

    fn name(self) -> String {
        match self {
            Metric::Recall(k) => format!("r@{k}"),
            Metric::ExactMatch => "em".into(),
            Metric::Ndcg10 => "ndcg@10".into(),
        }
    }
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let metric = Metric::parse(&args.metric, args.k)?;
    let mut manifest = ManifestBuilder::new("eval", args);
    let need = |v: &Option<PathBuf>, flag: &str| -> CliResult<PathBuf> {
        v.clone()
            .ok_or_else(|| CliError::Usage(format!("--metric {} requires {flag}", metric.name())))
    };
    let value = match metric {
        Metric::ExactMatch => {
            let ppath = need(&args.predictions, "--predictions")?;
            let qpath = need(&args.queries, "--queries")?;
            manifest.input(&ppath).input(&qpath);
            let preds = read_predictions(&ppath)?;
            let queries = read_records(&qpath).field("queries")?;
            let predictions: Vec<String> = queries
                .iter()
                .map(|q| preds.get(&q.id).cloned().unwrap_or_default())
                .collect();
            let golds: Vec<Vec<String>> = queries.iter().map(|q| q.answers.clone()).collect();
            exact_match(&predictions, &golds)
        }
        Metric::Ndcg10 => {
            let rpath = need(&args.run, "--run")?;
            let qpath = need(&args.qrels, "--qrels")?;
            manifest.input(&rpath).input(&qpath);
            ndcg_at_10(&Run::read(&rpath).field("run")?, &Qrels::read(&qpath).field("qrels")?)
        }
        Metric::Recall(k) => {
            let rpath = need(&args.run, "--run")?;
            manifest.input(&rpath);
            let run = Run::read(&rpath).field("run")?;
            if let Some(qpath) = &args.qrels {
                manifest.input(qpath);
                recall_at_k_qrels(&run, &Qrels::read(qpath).field("qrels")?, k)
            } else {
                let qpath = need(&args.queries, "--qrels or --queries")?;
                let cpath = need(&args.corpus, "--corpus")?;
                manifest.input(&qpath).input(&cpath);
                let queries = read_records(&qpath).field("queries")?;
                let docs: HashMap<String, String> = read_records(&cpath)
                    .field("corpus")?
                    .into_iter()
                    .map(|r| (r.id, r.text))
                    .collect();
                let answers: BTreeMap<String, Vec<String>> =
                    queries.iter().map(|q| (q.id.clone(), q.answers.clone())).collect();
                let doc_text = |id: &str| docs.get(id).cloned();
                let judge = Judge::Answers {
                    answers: &answers,
                    doc_text: &doc_text,
                };
                recall_at_k(&run, queries.iter().map(|q| q.id.as_str()), &judge, k)
            }
        }
    };
    println!("{}\t{value:.6}", metric.name());
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let report: BTreeMap<String, f64> = [(metric.name(), value)].into_iter().collect();
        write_json(&dir.join("metrics.json"), &report)?;
        manifest.write(dir)?;
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// BM25 candidates per query, judged documents always added.
    #[arg(long, default_value_t = 20)]
    pub candidates: usize,
    /// TSV report to write.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn probe(args: &ProbeArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("probe-heads", args);
    let (model, vocab, vocab_path) = load_model(&args.ckpt, args.vocab.as_deref())?;
    manifest
        .input(&args.ckpt)
        .input(&vocab_path)
        .input(&args.corpus)
        .input(&args.queries)
        .input(&args.qrels);
    let records = read_records(&args.corpus).field("corpus")?;
    let corpus = corpus_for(&model, &records, &vocab)?;
    let queries = make_queries(
        &read_records(&args.queries).field("queries")?,
        &vocab,
        model.config().max_query_len,
    )
    .field("queries")?;
    let qrels = Qrels::read(&args.qrels).field("qrels")?;
    let bm25 = Bm25Index::build(&corpus, Bm25Params::default());

    let mut probes = Vec::new();
    for q in &queries {
        let Some(judged) = qrels.0.get(&q.id) else {
            continue;
        };
        let mut cands: BTreeSet<_> = bm25
            .search(&q.tokens, args.candidates)
            .into_iter()
            .map(|(d, _)| d)
            .collect();
        cands.extend(judged.keys().filter_map(|d| corpus.lookup(d)));
        let enc_q = model.encode_query(&q.tokens)?;
        let mut head_scores = Vec::with_capacity(cands.len());
        let mut labels = Vec::with_capacity(cands.len());
        for d in cands {
            let doc = corpus.get(d);
            let enc_d = model.encode_doc(&doc.tokens)?;
            let scores = (0..model.config().heads)
                .map(|h| head_relevance(&enc_q, &enc_d, h))
                .collect::<reatt::Result<Vec<_>>>()?;
            head_scores.push(scores);
            labels.push(qrels.grade(&q.id, &doc.external_id) > 0);
        }
        probes.push(ProbeQuery { head_scores, labels });
    }
    let report = probe_heads(&probes, &model.head_weights());
    create_dir(&dir_of(&args.out))?;
    let file = File::create(&args.out).map_err(|e| io_err(&args.out, e))?;
    let mut w = BufWriter::new(file);
    write_probe_report(&mut w, &report)
        .and_then(|()| w.flush())
        .map_err(|e| io_err(&args.out, e))?;
    manifest.write(&dir_of(&args.out))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_names_parse() {
        assert_eq!(Metric::parse("r@5", None).unwrap(), Metric::Recall(5));
        assert_eq!(Metric::parse("R@k", Some(20)).unwrap(), Metric::Recall(20));
        assert_eq!(Metric::parse("em", None).unwrap(), Metric::ExactMatch);
        assert_eq!(Metric::parse("nDCG@10", None).unwrap(), Metric::Ndcg10);
        assert!(matches!(Metric::parse("r@k", None), Err(CliError::Usage(_))));
        assert!(matches!(Metric::parse("r@0", None), Err(CliError::Usage(_))));
        assert!(matches!(Metric::parse("map", None), Err(CliError::Usage(_))));
    }
}
