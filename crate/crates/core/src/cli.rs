//! The `ggcn` command line.
//!
//! Settings resolve in three layers: built-in defaults, then the file named
//! by `GGCN_CONFIG` (`key = value` lines, keys spelled like the flags), then
//! the flags themselves.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{graph_distances, parse_corpus, Sentence};
use crate::encoder::{
    load_contextual_embeddings, load_lookup_embeddings, EmbeddingProvider, LookupEmbeddings,
};
use crate::error::{Error, Result};
use crate::tensor::{grad_check, GradCheckConfig, GradCheckReport};
use crate::trainer::{
    checkpoint, evaluate, parse_key_values, predict, train_with, training_candidates, Dataset,
    EmbeddingInit, GatedGcnModel, TrainConfig,
};

/// Tolerance for the `gradcheck` command.
pub const GRADCHECK_TOL: f64 = 1e-4;

const PATH_KEYS: [&str; 7] = [
    "corpus",
    "dev",
    "embeddings",
    "contextual",
    "dev-contextual",
    "checkpoint",
    "out",
];

#[derive(Parser, Debug)]
#[command(
    name = "ggcn",
    version,
    about = "Gated graph convolutions for event trigger detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write the best-epoch checkpoint.
    Train(TrainArgs),
    /// Print P, R and F of a checkpoint on a corpus.
    Evaluate(CorpusArgs),
    /// Print the predicted type of every token.
    Predict(CorpusArgs),
    /// Compare analytic and numeric gradients on a built-in 3-token sentence.
    Gradcheck(GradcheckArgs),
    /// Print graph distances and graph/model importance scores for one trigger.
    InspectScores(InspectArgs),
}

#[derive(Args, Debug, Default)]
struct Hyper {
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gcn_layers: Option<usize>,
    #[arg(long)]
    no_gates: bool,
    #[arg(long)]
    no_diversity: bool,
    #[arg(long)]
    no_consistency: bool,
    /// `kl` or `literal`.
    #[arg(long)]
    isc_form: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    negative_keep_prob: Option<f64>,
    /// Average the gate-diversity sum over layer pairs.
    #[arg(long)]
    gd_pair_mean: bool,
    /// `embedding` or `h0`.
    #[arg(long)]
    gate_source: Option<String>,
    #[arg(long)]
    lstm_hidden: Option<usize>,
    #[arg(long)]
    gcn_dim: Option<usize>,
    #[arg(long)]
    score_dim: Option<usize>,
    #[arg(long)]
    ffn_hidden: Option<usize>,
    /// Width of random embeddings when no `--embeddings` file is given.
    #[arg(long)]
    embed_dim: Option<usize>,
}

impl Hyper {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        fn opt<T: ToString>(
            out: &mut Vec<(&'static str, String)>,
            key: &'static str,
            v: &Option<T>,
        ) {
            if let Some(v) = v {
                out.push((key, v.to_string()));
            }
        }
        let mut out = Vec::new();
        opt(&mut out, "alpha", &self.alpha);
        opt(&mut out, "beta", &self.beta);
        opt(&mut out, "lr", &self.lr);
        opt(&mut out, "epochs", &self.epochs);
        opt(&mut out, "batch-size", &self.batch_size);
        opt(&mut out, "seed", &self.seed);
        opt(&mut out, "gcn-layers", &self.gcn_layers);
        opt(&mut out, "isc-form", &self.isc_form);
        opt(&mut out, "negative-keep-prob", &self.negative_keep_prob);
        opt(&mut out, "gate-source", &self.gate_source);
        opt(&mut out, "lstm-hidden", &self.lstm_hidden);
        opt(&mut out, "gcn-dim", &self.gcn_dim);
        opt(&mut out, "score-dim", &self.score_dim);
        opt(&mut out, "ffn-hidden", &self.ffn_hidden);
        opt(&mut out, "embed-dim", &self.embed_dim);
        for (key, set) in [
            ("no-gates", self.no_gates),
            ("no-diversity", self.no_diversity),
            ("no-consistency", self.no_consistency),
            ("gd-pair-mean", self.gd_pair_mean),
        ] {
            if set {
                out.push((key, "true".into()));
            }
        }
        out
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Model selection corpus; the training corpus when omitted.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Word vectors in text format.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Precomputed contextual vectors for the training corpus.
    #[arg(long)]
    contextual: Option<PathBuf>,
    #[arg(long)]
    dev_contextual: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    freeze_embeddings: bool,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    contextual: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    paths: CorpusArgs,
    /// 0-based sentence ordinal.
    #[arg(long)]
    sentence: usize,
    /// 1-based trigger position.
    #[arg(long)]
    trigger: usize,
}

/// Failure of a command, with the exit status it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 1,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

/// Values from the config file, split into training keys and path keys.
#[derive(Debug, Default)]
struct FileConfig {
    train: Vec<(String, String)>,
    paths: BTreeMap<String, PathBuf>,
}

impl FileConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut out = FileConfig::default();
        let pairs =
            parse_key_values(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        for (k, v) in pairs {
            if PATH_KEYS.contains(&k.as_str()) {
                out.paths.insert(k, PathBuf::from(v));
            } else if TrainConfig::is_key(&k) {
                out.train.push((k, v));
            } else {
                return Err(Error::Config(format!("unknown key `{k}` in config file")));
            }
        }
        Ok(out)
    }

    fn path(&self, flag: &Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.clone().or_else(|| self.paths.get(key).cloned())
    }

    fn require(&self, flag: &Option<PathBuf>, key: &str) -> std::result::Result<PathBuf, Failure> {
        self.path(flag, key)
            .ok_or_else(|| usage(format!("missing required flag --{key}")))
    }

    fn train_config(&self, hyper: &Hyper) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in &self.train {
            cfg.set(k, v)?;
        }
        for (k, v) in hyper.pairs() {
            cfg.set(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the CLI. `args` includes the program name; `config_path` is the
/// value of `GGCN_CONFIG`, if any. Returns the exit status.
pub fn run(
    args: &[String],
    config_path: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let file = match config_path {
        None => Ok(FileConfig::default()),
        Some(p) => fs::read_to_string(p)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", p.display())))
            .and_then(|text| FileConfig::parse(&text).map_err(Failure::from)),
    };
    let result = file.and_then(|file| dispatch(cli.command, &file, out, err));
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.msg);
            f.code
        }
    }
}

fn dispatch(
    command: Command,
    file: &FileConfig,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::result::Result<(), Failure> {
    match command {
        Command::Train(a) => cmd_train(a, file, out, err),
        Command::Evaluate(a) => cmd_evaluate(a, file, out),
        Command::Predict(a) => cmd_predict(a, file, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, file, out),
        Command::InspectScores(a) => cmd_inspect(a, file, out),
    }
}

fn read_corpus(path: &Path) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    parse_corpus(&text)
}

fn load_dataset(path: &Path, contextual: Option<PathBuf>) -> Result<Dataset> {
    let sentences = read_corpus(path)?;
    let store = match contextual {
        Some(p) => Some(load_contextual_embeddings(p, &sentences)?),
        None => None,
    };
    Ok(Dataset::new(sentences, store))
}

fn cmd_train(
    a: TrainArgs,
    file: &FileConfig,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::result::Result<(), Failure> {
    let corpus = file.require(&a.corpus, "corpus")?;
    let out_path = file.require(&a.out, "out")?;
    let cfg = file.train_config(&a.hyper)?;
    let embeddings = file.path(&a.embeddings, "embeddings");
    let contextual = file.path(&a.contextual, "contextual");
    if embeddings.is_some() && contextual.is_some() {
        return Err(usage(
            "--embeddings and --contextual are mutually exclusive",
        ));
    }
    let train_data = load_dataset(&corpus, contextual.clone())?;
    let dev_data = match file.path(&a.dev, "dev") {
        Some(dev) => {
            let dev_ctx = file.path(&a.dev_contextual, "dev-contextual");
            if contextual.is_some() && dev_ctx.is_none() {
                return Err(usage("missing required flag --dev-contextual"));
            }
            load_dataset(&dev, dev_ctx)?
        }
        None => train_data.clone(),
    };
    let trainable = !a.freeze_embeddings;
    let embedding = if let Some(store) = &train_data.contextual {
        EmbeddingInit::Contextual { dim: store.dim() }
    } else if let Some(p) = embeddings {
        EmbeddingInit::Lookup(load_lookup_embeddings(
            p,
            trainable,
            cfg.seed,
            cfg.embed_dim,
        )?)
    } else {
        let words = train_data
            .sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(String::as_str));
        EmbeddingInit::Lookup(LookupEmbeddings::random(
            words,
            cfg.embed_dim,
            trainable,
            cfg.seed,
        )?)
    };
    let mut write_failed = None;
    let outcome = train_with(&cfg, embedding, &train_data, &dev_data, |r| {
        if let Err(e) = writeln!(out, "{}", r.log_line()) {
            write_failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_failed {
        return Err(e.into());
    }
    checkpoint::save(&outcome.model, &out_path)?;
    let _ = writeln!(
        err,
        "best epoch {} (dev F {:.3}); checkpoint written to {}",
        outcome.best_epoch,
        outcome.log[outcome.best_epoch - 1].dev.f1,
        out_path.display()
    );
    Ok(())
}

fn load_model_and_data(
    a: &CorpusArgs,
    file: &FileConfig,
) -> std::result::Result<(GatedGcnModel, Dataset), Failure> {
    let ckpt = file.require(&a.checkpoint, "checkpoint")?;
    let corpus = file.require(&a.corpus, "corpus")?;
    let model = checkpoint::load(&ckpt)?;
    let contextual = file.path(&a.contextual, "contextual");
    if matches!(model.provider, EmbeddingProvider::Contextual { .. }) && contextual.is_none() {
        return Err(usage("this checkpoint needs --contextual"));
    }
    let data = load_dataset(&corpus, contextual)?;
    model.check_dataset(&data)?;
    Ok((model, data))
}

fn cmd_evaluate(
    a: CorpusArgs,
    file: &FileConfig,
    out: &mut dyn Write,
) -> std::result::Result<(), Failure> {
    let (model, data) = load_model_and_data(&a, file)?;
    let report = evaluate(&model, &data)?;
    writeln!(out, "{}", report.prf_line())?;
    Ok(())
}

fn cmd_predict(
    a: CorpusArgs,
    file: &FileConfig,
    out: &mut dyn Write,
) -> std::result::Result<(), Failure> {
    let (model, data) = load_model_and_data(&a, file)?;
    let predictions = predict(&model, &data)?;
    writeln!(out, "sentence\ttoken\tword\ttype\tprobability")?;
    for (ordinal, (s, preds)) in data.sentences.iter().zip(&predictions).enumerate() {
        for (i, &(k, p)) in preds.iter().enumerate() {
            writeln!(
                out,
                "{ordinal}\t{}\t{}\t{}\t{p:.4}",
                i + 1,
                s.tokens[i],
                model.labels[k]
            )?;
        }
    }
    Ok(())
}

/// The fixed 3-token sentence used by `gradcheck`.
pub const GRADCHECK_FIXTURE: &str = "\
1\ttroops\t2\tnsubj\tO
2\tattacked\t0\troot\tAttack
3\tcity\t2\tobj\tO
";

/// Small widths used by `gradcheck` unless overridden.
pub fn gradcheck_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        lstm_hidden: 3,
        gcn_dim: 4,
        score_dim: 3,
        ffn_hidden: 4,
        embed_dim: 4,
        ..Default::default()
    }
}

/// Gradient check of the mean combined loss over all three candidates of
/// the fixture, through every parameter including the embedding table.
pub fn gradcheck_fixture(cfg: &TrainConfig) -> Result<GradCheckReport> {
    let data = Dataset::new(parse_corpus(GRADCHECK_FIXTURE)?, None);
    let labels = vec!["None".to_string(), "Attack".to_string()];
    let words = data.sentences[0].tokens.iter().map(String::as_str);
    let lookup = LookupEmbeddings::random(words, cfg.embed_dim, true, cfg.seed)?;
    let mut model = GatedGcnModel::new(cfg.clone(), labels, EmbeddingInit::Lookup(lookup))?;
    let batch = training_candidates(&model, &data)?;
    let mut params = std::mem::take(&mut model.params);
    let check = GradCheckConfig {
        seed: cfg.seed,
        ..Default::default()
    };
    grad_check(
        |tape, ps| {
            let m = GatedGcnModel {
                params: ps.clone(),
                ..model.clone()
            };
            let enc = m.encode_sentence(tape, &data, 0)?;
            let mut totals = Vec::new();
            for &(_, t, y) in &batch {
                let out = m.forward_candidate(tape, &data.sentences[0], &enc, t, Some(y))?;
                totals.push(out.losses.expect("gold given").total);
            }
            let stacked = tape.concat_rows(&totals)?;
            let sum = tape.sum_all(stacked)?;
            tape.scale(sum, 1.0 / batch.len() as f64)
        },
        &mut params,
        &check,
    )
}

fn cmd_gradcheck(
    a: GradcheckArgs,
    file: &FileConfig,
    out: &mut dyn Write,
) -> std::result::Result<(), Failure> {
    let mut cfg = gradcheck_config(0);
    for (k, v) in &file.train {
        cfg.set(k, v)?;
    }
    for (k, v) in a.hyper.pairs() {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    let report = gradcheck_fixture(&cfg)?;
    let verdict = if report.passed(GRADCHECK_TOL) {
        "PASS"
    } else {
        "FAIL"
    };
    writeln!(
        out,
        "max relative error {:.3e} over {} coordinates ({} kinks skipped)\t{verdict}",
        report.max_rel_error, report.checked, report.kinks_skipped
    )?;
    if verdict == "FAIL" {
        return Err(Failure {
            code: 1,
            msg: format!("gradient check failed at tolerance {GRADCHECK_TOL:e}"),
        });
    }
    Ok(())
}

fn cmd_inspect(
    a: InspectArgs,
    file: &FileConfig,
    out: &mut dyn Write,
) -> std::result::Result<(), Failure> {
    let (model, data) = load_model_and_data(&a.paths, file)?;
    let sentence = data.sentences.get(a.sentence).ok_or_else(|| {
        usage(format!(
            "--sentence {} is out of range; the corpus has {} sentences",
            a.sentence,
            data.len()
        ))
    })?;
    if a.trigger == 0 || a.trigger > sentence.len() {
        return Err(usage(format!(
            "--trigger {} is outside 1..={}",
            a.trigger,
            sentence.len()
        )));
    }
    let graph = graph_distances(sentence, a.trigger)?;
    let q = model.importance_scores(&data, a.sentence, a.trigger)?;
    writeln!(out, "token\tdistance\tp\tq")?;
    for (i, word) in sentence.tokens.iter().enumerate() {
        writeln!(
            out,
            "{word}\t{}\t{:.6}\t{:.6}",
            graph.distances[i], graph.p_dist[i], q[i]
        )?;
    }
    Ok(())
}
