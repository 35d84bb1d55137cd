//! Command implementations behind the `rdpo-lab` binary.
//!
//! Every command writes into its own output directory and finishes by writing
//! `manifest.json`, a [`RunManifest`] listing the SHA-256 of every other file
//! in that directory. Layout of a [`pipeline`] run:
//!
//! ```text
//! <out>/data       train.jsonl val.jsonl test.jsonl vocab.json config.json
//! <out>/sft        checkpoint.rdpo state.json train_config.json train_log.csv
//! <out>/rdpo       same as sft
//! <out>/eval-sft   scores.csv summary.json candidates.jsonl
//! <out>/eval-rdpo  same as eval-sft
//! <out>/compare    comparison.md comparison.csv comparison.json
//! ```
//!
//! Tables are labeled from checkpoint metadata only: the `RDPO` column is the
//! checkpoint stage, and method and dataset come from the checkpoint header.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{LogRecord, TrainConfig, TrainState, Trainer};
use crate::exec::Exec;
use crate::metrics::{corpus_bleu, wilcoxon_one_sided, MetricVector, Scorer, SignificanceResult, StaticEmbeddings};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Dims, Stage};
use crate::synthcxr::{
    detokenize, tokenize, Corpus, CorpusConfig, Example, Split, CONFIG_FILE, VOCAB_FILE,
};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.rdpo";
pub const STATE_FILE: &str = "state.json";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const COMPARISON_MD: &str = "comparison.md";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_JSON: &str = "comparison.json";

/// Label written for candidates that did not come from a checkpoint.
pub const EXTERNAL_METHOD: &str = "external";

/// Per-stage seed derived from a master seed: the first 8 bytes (little
/// endian) of `SHA-256(master.to_le_bytes() || stage)`.
pub fn split_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

const CORPUS_FILES: [&str; 5] = [CONFIG_FILE, VOCAB_FILE, "train.jsonl", "val.jsonl", "test.jsonl"];

/// Hash of a corpus directory: every corpus file in a fixed order, each
/// prefixed by its name and byte length.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in CORPUS_FILES {
        let bytes = read_bytes(&dir.join(name))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Dataset label stored in checkpoints trained on the corpus in `dir`.
fn dataset_label(corpus_hash: &str) -> String {
    format!("synthcxr-{}", &corpus_hash[..8])
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash prefix of the command, resolved config and input hashes.
    pub run_id: String,
    pub command: String,
    pub config: serde_json::Value,
    pub corpus_hash: Option<String>,
    /// Input checkpoints by role.
    pub checkpoints: BTreeMap<String, String>,
    pub metric_summary: Option<serde_json::Value>,
    pub outputs: Vec<FileHash>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    fn start(command: &str, config: serde_json::Value, corpus_hash: Option<String>) -> Self {
        Self {
            run_id: String::new(),
            command: command.to_string(),
            config,
            corpus_hash,
            checkpoints: BTreeMap::new(),
            metric_summary: None,
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    /// Hashes the files of `dir` and writes the manifest there.
    fn finish(mut self, dir: &Path) -> Result<Self> {
        let mut id = Sha256::new();
        id.update(self.command.as_bytes());
        id.update(serde_json::to_vec(&self.config)?);
        id.update(self.corpus_hash.as_deref().unwrap_or("").as_bytes());
        for (k, v) in &self.checkpoints {
            id.update(k.as_bytes());
            id.update(v.as_bytes());
        }
        self.run_id = hex::encode(&id.finalize()[..8]);
        self.outputs = Vec::new();
        for name in list_files(dir)? {
            if name != MANIFEST_FILE {
                let sha256 = file_sha256(&dir.join(&name))?;
                self.outputs.push(FileHash { path: name, sha256 });
            }
        }
        self.finished_unix = unix_now();
        write_bytes(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        serde_json::from_slice(&read_bytes(&path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Checks that every listed output exists with the recorded hash and that
    /// no unlisted file sits next to the manifest.
    pub fn verify(dir: &Path) -> Result<Self> {
        let m = Self::read(dir)?;
        let listed: BTreeSet<&str> = m.outputs.iter().map(|f| f.path.as_str()).collect();
        for name in list_files(dir)? {
            if name != MANIFEST_FILE && !listed.contains(name.as_str()) {
                return Err(Error::Data(format!("{name} is not listed in the manifest")));
            }
        }
        for f in &m.outputs {
            let actual = file_sha256(&dir.join(&f.path))?;
            if actual != f.sha256 {
                return Err(Error::Data(format!("{} does not match its manifest hash", f.path)));
            }
        }
        Ok(m)
    }
}

fn list_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Creates `dir`, or clears the files in it when `force` is set. A non-empty
/// directory without `force` is refused.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            if !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
            for name in list_files(dir)? {
                let p = dir.join(name);
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------------------
// Config resolution
// ---------------------------------------------------------------------------

fn read_json_object(path: &Path) -> Result<serde_json::Map<String, serde_json::Value>> {
    let bytes = read_bytes(path).map_err(|e| Error::Config(e.to_string()))?;
    match serde_json::from_slice(&bytes) {
        Ok(serde_json::Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::Config(format!("{} must hold a JSON object", path.display()))),
        Err(e) => Err(Error::Config(format!("{}: {e}", path.display()))),
    }
}

/// Corpus config from an optional JSON file; `seed` replaces the file's seed
/// with the data-stage seed derived from it.
pub fn resolve_corpus_config(path: Option<&Path>, seed: Option<u64>) -> Result<CorpusConfig> {
    let mut cfg: CorpusConfig = match path {
        Some(p) => serde_json::from_value(serde_json::Value::Object(read_json_object(p)?))
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => CorpusConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = split_seed(s, "data");
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Training config: `base` overlaid with the keys of an optional JSON file,
/// then the stage seed derived from `seed`.
pub fn resolve_train_config(base: TrainConfig, path: Option<&Path>, seed: Option<u64>, stage: &str) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => base.merged_with_json(&serde_json::Value::Object(read_json_object(p)?).to_string())?,
        None => base,
    };
    if let Some(s) = seed {
        cfg.seed = split_seed(s, stage);
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub struct GenDataArgs {
    pub config: CorpusConfig,
    pub out: PathBuf,
    pub force: bool,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<RunManifest> {
    args.config.validate()?;
    prepare_out_dir(&args.out, args.force)?;
    let started = RunManifest::start("gen-data", serde_json::to_value(&args.config)?, None);
    let corpus = Corpus::generate(&args.config, Exec::default())?;
    corpus.write(&args.out)?;
    let mut m = started;
    m.corpus_hash = Some(corpus_hash(&args.out)?);
    m.metric_summary = Some(serde_json::json!({
        "n_train": corpus.train.len(),
        "n_val": corpus.val.len(),
        "n_test": corpus.test.len(),
        "vocab_size": corpus.vocab().len(),
    }));
    m.finish(&args.out)
}

// ---------------------------------------------------------------------------
// sft / align
// ---------------------------------------------------------------------------

pub struct TrainArgs {
    pub corpus: PathBuf,
    pub config: TrainConfig,
    pub out: PathBuf,
    pub force: bool,
    /// Stop after this many optimizer steps; the run can be resumed.
    pub max_steps: Option<u64>,
    /// Continue the run saved in `out`.
    pub resume: bool,
}

/// Summary of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub total_steps: u64,
    pub finished: bool,
    pub first_loss: Option<f64>,
    /// Mean over the last epoch's steps (or all steps when fewer).
    pub final_epoch_loss: Option<f64>,
    pub final_epoch_reward_acc: Option<f64>,
}

impl TrainSummary {
    pub fn from_history(history: &[LogRecord], steps_per_epoch: usize, total_steps: u64) -> Self {
        let tail = &history[history.len().saturating_sub(steps_per_epoch)..];
        let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        Self {
            steps: history.len() as u64,
            total_steps,
            finished: history.len() as u64 >= total_steps,
            first_loss: history.first().map(|r| r.loss),
            final_epoch_loss: mean(tail.iter().map(|r| r.loss).collect()),
            final_epoch_reward_acc: mean(tail.iter().filter_map(|r| r.reward_acc).collect()),
        }
    }
}

pub fn cmd_sft(args: &TrainArgs) -> Result<RunManifest> {
    train_command("sft", args, None)
}

pub fn cmd_align(args: &TrainArgs, sft_checkpoint: &Path) -> Result<RunManifest> {
    train_command("align", args, Some(sft_checkpoint))
}

fn train_command(command: &str, args: &TrainArgs, sft_path: Option<&Path>) -> Result<RunManifest> {
    let chash = corpus_hash(&args.corpus)?;
    let corpus = Corpus::read(&args.corpus)?;
    let vocab_hash = corpus.vocab().hash();
    let n = corpus.train.len();

    let sft = match sft_path {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.meta.stage != Stage::Sft {
                return Err(Error::Data(format!("{} is not an SFT checkpoint", p.display())));
            }
            check_vocab(&ck, &vocab_hash, p)?;
            Some((ck, file_sha256(p)?))
        }
        None => None,
    };

    let mut trainer = if args.resume {
        let saved: TrainConfig = serde_json::from_slice(&read_bytes(&args.out.join(TRAIN_CONFIG_FILE))?)
            .map_err(|e| Error::Data(format!("{TRAIN_CONFIG_FILE}: {e}")))?;
        if saved != args.config {
            return Err(Error::Config("resume config differs from the saved run; pass the original arguments".into()));
        }
        let state: TrainState = serde_json::from_slice(&read_bytes(&args.out.join(STATE_FILE))?)
            .map_err(|e| Error::Data(format!("{STATE_FILE}: {e}")))?;
        let partial = load_checkpoint(&args.out.join(CHECKPOINT_FILE))?;
        check_vocab(&partial, &vocab_hash, &args.out.join(CHECKPOINT_FILE))?;
        Trainer::resume(sft.as_ref().map(|(c, _)| c), &partial, n, &args.config, state)?
    } else {
        prepare_out_dir(&args.out, args.force)?;
        match &sft {
            Some((ck, _)) => Trainer::rdpo(ck, n, &args.config)?,
            None => {
                let dims = Dims {
                    vocab: corpus.vocab().len(),
                    hidden: args.config.hidden,
                    grid: corpus.config().grid,
                };
                Trainer::sft(dims, &vocab_hash, &dataset_label(&chash), n, &args.config)?
            }
        }
    };

    let mut manifest = RunManifest::start(command, serde_json::to_value(&args.config)?, Some(chash));
    if let Some((_, h)) = &sft {
        manifest.checkpoints.insert("sft".into(), h.clone());
    }

    trainer.run(&corpus.train, args.max_steps)?;

    let state = trainer.state();
    save_checkpoint(&trainer.checkpoint(), &args.out.join(CHECKPOINT_FILE))?;
    write_bytes(&args.out.join(STATE_FILE), serde_json::to_string(state)?.as_bytes())?;
    write_bytes(&args.out.join(TRAIN_CONFIG_FILE), serde_json::to_string_pretty(&args.config)?.as_bytes())?;
    write_train_log(&args.out.join(TRAIN_LOG_FILE), &state.history)?;
    let sched = trainer.schedule();
    let summary = TrainSummary::from_history(&state.history, sched.steps_per_epoch, sched.total_steps);
    manifest.metric_summary = Some(serde_json::to_value(&summary)?);
    manifest.finish(&args.out)
}

fn check_vocab(ck: &Checkpoint, vocab_hash: &str, path: &Path) -> Result<()> {
    if ck.meta.vocab_hash != vocab_hash {
        return Err(Error::Data(format!(
            "{}: checkpoint vocabulary {} does not match corpus vocabulary {}",
            path.display(),
            ck.meta.vocab_hash,
            vocab_hash
        )));
    }
    Ok(())
}

fn write_train_log(path: &Path, history: &[LogRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "lr", "loss", "mean_margin", "reward_acc"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        w.write_record([r.step.to_string(), r.lr.to_string(), r.loss.to_string(), opt(r.mean_margin), opt(r.reward_acc)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a training log written by `sft` or `align`.
pub fn read_train_log(path: &Path) -> Result<Vec<LogRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let parse_opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Data(format!("bad number {s:?} in training log")))
        }
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("bad field {i} in training log")))
        };
        out.push(LogRecord {
            step: num(0)? as u64,
            lr: num(1)?,
            loss: num(2)?,
            mean_margin: parse_opt(rec.get(3).unwrap_or(""))?,
            reward_acc: parse_opt(rec.get(4).unwrap_or(""))?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Where the candidate reports come from.
pub enum CandidateSource {
    /// Greedy decoding of a checkpoint.
    Checkpoint(PathBuf),
    /// A JSONL file of `{"id", "report"}` records.
    File(PathBuf),
}

pub struct EvalArgs {
    pub corpus: PathBuf,
    pub split: Split,
    pub source: CandidateSource,
    pub out: PathBuf,
    pub force: bool,
}

/// Labels and means written next to `scores.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub dataset: String,
    pub rdpo: bool,
    pub stage: Option<Stage>,
    pub checkpoint_sha256: Option<String>,
    pub split: String,
    pub n: usize,
    pub means: MetricVector,
    pub corpus_bleu: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateRecord {
    id: String,
    report: String,
}

pub fn cmd_evaluate(args: &EvalArgs) -> Result<RunManifest> {
    let chash = corpus_hash(&args.corpus)?;
    let corpus = Corpus::read(&args.corpus)?;
    let vocab = corpus.vocab();
    let refs = corpus.split(args.split);
    let max_len = corpus.config().max_len;

    let mut manifest = RunManifest::start(
        "evaluate",
        serde_json::json!({ "split": args.split.name() }),
        Some(chash.clone()),
    );

    let (candidates, method, dataset, stage, ck_hash) = match &args.source {
        CandidateSource::Checkpoint(p) => {
            let ck = load_checkpoint(p)?;
            check_vocab(&ck, &vocab.hash(), p)?;
            let h = file_sha256(p)?;
            manifest.checkpoints.insert("candidate".into(), h.clone());
            let policy = ck.policy()?;
            let decoded = Exec::default().map(refs, |ex| policy.greedy_decode(&ex.image, max_len));
            let decoded = decoded.into_iter().collect::<Result<Vec<_>>>()?;
            (decoded, ck.meta.method.clone(), ck.meta.dataset.clone(), Some(ck.meta.stage), Some(h))
        }
        CandidateSource::File(p) => {
            let by_id = read_candidates(p)?;
            check_ids(refs, &by_id)?;
            let toks = refs
                .iter()
                .map(|ex| tokenize(&by_id[&ex.id], vocab).map_err(|e| Error::Data(format!("candidate {}: {e}", ex.id))))
                .collect::<Result<Vec<_>>>()?;
            manifest.checkpoints.insert("candidates_file".into(), file_sha256(p)?);
            (toks, EXTERNAL_METHOD.to_string(), dataset_label(&chash), None, None)
        }
    };
    prepare_out_dir(&args.out, args.force)?;

    let emb = StaticEmbeddings::from_reports(
        corpus.train.iter().map(|e| e.report.tokens.as_slice()),
        vocab.len(),
        StaticEmbeddings::DEFAULT_DIM,
    );
    let scorer = Scorer {
        grammar: &corpus.grammar,
        embeddings: &emb,
    };
    let idx: Vec<usize> = (0..refs.len()).collect();
    let rows: Vec<MetricVector> = Exec::default().map(&idx, |&i| scorer.score(&candidates[i], &refs[i].report.tokens));

    let mut order = idx.clone();
    order.sort_by(|&a, &b| refs[a].id.cmp(&refs[b].id));

    let mut w = csv::Writer::from_path(args.out.join(SCORES_FILE))?;
    let mut header = vec!["id"];
    header.extend(MetricVector::NAMES);
    w.write_record(&header)?;
    for &i in &order {
        let mut rec = vec![refs[i].id.clone()];
        rec.extend(rows[i].values().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(args.out.join(SCORES_FILE), e))?;

    let mut jsonl = String::new();
    for &i in &order {
        let rec = CandidateRecord {
            id: refs[i].id.clone(),
            report: detokenize(&candidates[i], vocab),
        };
        jsonl.push_str(&serde_json::to_string(&rec)?);
        jsonl.push('\n');
    }
    write_bytes(&args.out.join(CANDIDATES_FILE), jsonl.as_bytes())?;

    let pairs: Vec<(&[usize], &[usize])> = order
        .iter()
        .map(|&i| (candidates[i].as_slice(), refs[i].report.tokens.as_slice()))
        .collect();
    let ordered: Vec<MetricVector> = order.iter().map(|&i| rows[i]).collect();
    let summary = EvalSummary {
        method,
        dataset,
        rdpo: stage == Some(Stage::Rdpo),
        stage,
        checkpoint_sha256: ck_hash,
        split: args.split.name().to_string(),
        n: refs.len(),
        means: MetricVector::mean(&ordered),
        corpus_bleu: corpus_bleu(&pairs, 4),
    };
    write_bytes(&args.out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    manifest.metric_summary = Some(serde_json::to_value(summary.means)?);
    manifest.finish(&args.out)
}

fn read_candidates(path: &Path) -> Result<HashMap<String, String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CandidateRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if out.insert(rec.id.clone(), rec.report).is_some() {
            return Err(Error::Data(format!("duplicate candidate id {}", rec.id)));
        }
    }
    Ok(out)
}

fn check_ids(refs: &[Example], cands: &HashMap<String, String>) -> Result<()> {
    let want: BTreeSet<&str> = refs.iter().map(|e| e.id.as_str()).collect();
    let have: BTreeSet<&str> = cands.keys().map(String::as_str).collect();
    let missing: Vec<&str> = want.difference(&have).copied().collect();
    let extra: Vec<&str> = have.difference(&want).copied().collect();
    if missing.is_empty() && extra.is_empty() {
        return Ok(());
    }
    let mut msg = String::new();
    if !missing.is_empty() {
        write!(msg, "missing candidate ids: {}", missing.join(", ")).expect("writing to a String");
    }
    if !extra.is_empty() {
        if !msg.is_empty() {
            msg.push_str("; ");
        }
        write!(msg, "unknown candidate ids: {}", extra.join(", ")).expect("writing to a String");
    }
    Err(Error::Data(msg))
}

/// Reads `scores.csv` as `(id, metrics)` rows.
pub fn read_scores(path: &Path) -> Result<Vec<(String, MetricVector)>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let expected: Vec<&str> = std::iter::once("id").chain(MetricVector::NAMES).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut v = [0.0; 5];
        for (k, slot) in v.iter_mut().enumerate() {
            let s = &rec[k + 1];
            *slot = s
                .parse()
                .ok()
                .filter(|x: &f64| (0.0..=1.0).contains(x))
                .ok_or_else(|| Error::Data(format!("{}: bad {} value {s:?}", path.display(), MetricVector::NAMES[k])))?;
        }
        out.push((rec[0].to_string(), MetricVector::from_values(v)));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

/// One table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub dataset: String,
    pub rdpo: bool,
    pub means: MetricVector,
    /// Composite improvement over the baseline is significant (never set on
    /// the baseline row).
    pub significant: bool,
}

/// Contents of `comparison.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub n_pairs: usize,
    pub baseline: ComparisonRow,
    pub candidate: ComparisonRow,
    /// One-sided test of `candidate − baseline > 0` per metric; `None` when
    /// every paired difference is zero.
    pub tests: BTreeMap<String, Option<SignificanceResult>>,
}

impl Comparison {
    pub fn composite_test(&self) -> Option<&SignificanceResult> {
        self.tests.get("composite").and_then(Option::as_ref)
    }
}

pub struct CompareArgs {
    pub baseline: PathBuf,
    pub rdpo: PathBuf,
    pub out: PathBuf,
    pub force: bool,
}

fn read_eval_summary(scores: &Path) -> Result<EvalSummary> {
    let path = scores.parent().unwrap_or(Path::new(".")).join(SUMMARY_FILE);
    serde_json::from_slice(&read_bytes(&path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Pairs two evaluations by id and tests the per-example differences.
pub fn compare_scores(
    baseline: &[(String, MetricVector)],
    candidate: &[(String, MetricVector)],
    base_summary: &EvalSummary,
    cand_summary: &EvalSummary,
) -> Result<Comparison> {
    let index = |rows: &[(String, MetricVector)], what: &str| -> Result<BTreeMap<String, MetricVector>> {
        let mut m = BTreeMap::new();
        for (id, v) in rows {
            if m.insert(id.clone(), *v).is_some() {
                return Err(Error::Data(format!("duplicate id {id} in {what} scores")));
            }
        }
        Ok(m)
    };
    let b = index(baseline, "baseline")?;
    let c = index(candidate, "rdpo")?;
    if b.keys().ne(c.keys()) {
        let only_b: Vec<&str> = b.keys().filter(|k| !c.contains_key(*k)).map(String::as_str).collect();
        let only_c: Vec<&str> = c.keys().filter(|k| !b.contains_key(*k)).map(String::as_str).collect();
        return Err(Error::Data(format!(
            "id sets differ: only in baseline [{}], only in rdpo [{}]",
            only_b.join(", "),
            only_c.join(", ")
        )));
    }
    if b.is_empty() {
        return Err(Error::Data("no scored examples to compare".into()));
    }
    let bs: Vec<MetricVector> = b.values().copied().collect();
    let cs: Vec<MetricVector> = c.values().copied().collect();

    let mut tests = BTreeMap::new();
    for (k, name) in MetricVector::NAMES.iter().enumerate() {
        let deltas: Vec<f64> = bs.iter().zip(&cs).map(|(x, y)| y.values()[k] - x.values()[k]).collect();
        let res = match wilcoxon_one_sided(&deltas) {
            Ok(r) => Some(r),
            Err(Error::DegenerateComparison) => None,
            Err(e) => return Err(e),
        };
        tests.insert(name.to_string(), res);
    }
    let significant = tests["composite"].is_some_and(|r| r.significant);
    let row = |s: &EvalSummary, rows: &[MetricVector], sig: bool| ComparisonRow {
        method: s.method.clone(),
        dataset: s.dataset.clone(),
        rdpo: s.rdpo,
        means: MetricVector::mean(rows),
        significant: sig,
    };
    Ok(Comparison {
        n_pairs: bs.len(),
        baseline: row(base_summary, &bs, false),
        candidate: row(cand_summary, &cs, significant),
        tests,
    })
}

/// Markdown table in the baseline-then-RDPO layout.
pub fn render_markdown(cmp: &Comparison) -> String {
    let mut s = String::new();
    s.push_str("| Method | Dataset | RDPO | BLEU | Embed-F1 | Semb | Graph-comb | Composite |\n");
    s.push_str("|---|---|:-:|--:|--:|--:|--:|--:|\n");
    for r in [&cmp.baseline, &cmp.candidate] {
        let v = r.means.values();
        let composite = if r.significant {
            format!("**{:.3}\\***", v[4])
        } else {
            format!("{:.3}", v[4])
        };
        writeln!(
            s,
            "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |",
            r.method,
            r.dataset,
            if r.rdpo { "✓" } else { "✗" },
            v[0],
            v[1],
            v[2],
            v[3],
            composite
        )
        .expect("writing to a String");
    }
    s.push('\n');
    match cmp.composite_test() {
        Some(t) => writeln!(
            s,
            "Composite, one-sided Wilcoxon signed-rank test (second row > first row): n = {}, W+ = {}, p = {:.4e} ({}). `*` marks p < 0.05.",
            t.n_effective,
            t.w_plus,
            t.p_value,
            match t.method {
                crate::metrics::PValueMethod::Exact => "exact",
                crate::metrics::PValueMethod::Normal => "normal approximation",
            }
        ),
        None => writeln!(s, "Composite: no difference (every paired difference is zero)."),
    }
    .expect("writing to a String");
    s
}

fn write_comparison_csv(path: &Path, cmp: &Comparison) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method", "dataset", "rdpo"];
    header.extend(MetricVector::NAMES);
    header.extend(["significant", "composite_p_value"]);
    w.write_record(&header)?;
    let p = cmp.composite_test().map(|t| t.p_value.to_string()).unwrap_or_else(|| "no difference".into());
    for (r, p) in [(&cmp.baseline, String::new()), (&cmp.candidate, p)] {
        let mut rec = vec![r.method.clone(), r.dataset.clone(), r.rdpo.to_string()];
        rec.extend(r.means.values().iter().map(|v| v.to_string()));
        rec.push(r.significant.to_string());
        rec.push(p);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_compare(args: &CompareArgs) -> Result<(RunManifest, Comparison)> {
    let base = read_scores(&args.baseline)?;
    let cand = read_scores(&args.rdpo)?;
    let bs = read_eval_summary(&args.baseline)?;
    let cs = read_eval_summary(&args.rdpo)?;
    let cmp = compare_scores(&base, &cand, &bs, &cs)?;
    prepare_out_dir(&args.out, args.force)?;
    let mut manifest = RunManifest::start("compare", serde_json::json!({}), None);
    manifest.checkpoints.insert("baseline_scores".into(), file_sha256(&args.baseline)?);
    manifest.checkpoints.insert("rdpo_scores".into(), file_sha256(&args.rdpo)?);
    write_bytes(&args.out.join(COMPARISON_MD), render_markdown(&cmp).as_bytes())?;
    write_comparison_csv(&args.out.join(COMPARISON_CSV), &cmp)?;
    write_bytes(&args.out.join(COMPARISON_JSON), serde_json::to_string_pretty(&cmp)?.as_bytes())?;
    manifest.metric_summary = Some(serde_json::json!({
        "baseline_composite": cmp.baseline.means.composite,
        "rdpo_composite": cmp.candidate.means.composite,
        "composite_p_value": cmp.composite_test().map(|t| t.p_value),
    }));
    Ok((manifest.finish(&args.out)?, cmp))
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

/// Stage configs of a full run. Each may be a partial JSON object in a
/// config file; missing stages use their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub sft: TrainConfig,
    pub align: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            sft: TrainConfig::sft(),
            align: TrainConfig::rdpo_desk(),
        }
    }
}

impl PipelineConfig {
    /// Defaults overlaid with an optional `{"corpus", "sft", "align"}` file;
    /// `seed` fans out to the three stage seeds.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            for (k, v) in read_json_object(p)? {
                let serde_json::Value::Object(_) = &v else {
                    return Err(Error::Config(format!("pipeline section {k:?} must be an object")));
                };
                match k.as_str() {
                    "corpus" => {
                        let mut base = serde_json::to_value(&cfg.corpus)?;
                        let obj = base.as_object_mut().expect("struct serializes to an object");
                        obj.extend(v.as_object().expect("checked above").clone());
                        cfg.corpus = serde_json::from_value(base).map_err(|e| Error::Config(format!("corpus: {e}")))?;
                    }
                    "sft" => cfg.sft = cfg.sft.merged_with_json(&v.to_string())?,
                    "align" => cfg.align = cfg.align.merged_with_json(&v.to_string())?,
                    other => return Err(Error::Config(format!("unknown pipeline section {other:?}"))),
                }
            }
        }
        if let Some(s) = seed {
            cfg.corpus.seed = split_seed(s, "data");
            cfg.sft.seed = split_seed(s, "sft");
            cfg.align.seed = split_seed(s, "rdpo");
        }
        cfg.corpus.validate()?;
        Ok(cfg)
    }
}

/// Paths and results of a [`pipeline`] run.
pub struct PipelineOutput {
    pub data: PathBuf,
    pub sft: PathBuf,
    pub rdpo: PathBuf,
    pub eval_sft: PathBuf,
    pub eval_rdpo: PathBuf,
    pub compare: PathBuf,
    pub comparison: Comparison,
    pub sft_summary: TrainSummary,
    pub rdpo_summary: TrainSummary,
}

/// gen-data, sft, align, evaluate (both checkpoints on the test split) and
/// compare, each in its own subdirectory of `out`.
pub fn pipeline(cfg: &PipelineConfig, out: &Path, force: bool) -> Result<PipelineOutput> {
    prepare_out_dir(out, force)?;
    let sub = |name: &str| out.join(name);
    let (data, sft, rdpo) = (sub("data"), sub("sft"), sub("rdpo"));
    let (eval_sft, eval_rdpo, compare) = (sub("eval-sft"), sub("eval-rdpo"), sub("compare"));

    cmd_gen_data(&GenDataArgs {
        config: cfg.corpus.clone(),
        out: data.clone(),
        force,
    })?;
    let train = |config: &TrainConfig, dir: &Path| TrainArgs {
        corpus: data.clone(),
        config: config.clone(),
        out: dir.to_path_buf(),
        force,
        max_steps: None,
        resume: false,
    };
    let m_sft = cmd_sft(&train(&cfg.sft, &sft))?;
    let m_rdpo = cmd_align(&train(&cfg.align, &rdpo), &sft.join(CHECKPOINT_FILE))?;
    for (ck, dir) in [(&sft, &eval_sft), (&rdpo, &eval_rdpo)] {
        cmd_evaluate(&EvalArgs {
            corpus: data.clone(),
            split: Split::Test,
            source: CandidateSource::Checkpoint(ck.join(CHECKPOINT_FILE)),
            out: dir.clone(),
            force,
        })?;
    }
    let (_, comparison) = cmd_compare(&CompareArgs {
        baseline: eval_sft.join(SCORES_FILE),
        rdpo: eval_rdpo.join(SCORES_FILE),
        out: compare.clone(),
        force,
    })?;
    let summary = |m: RunManifest| -> Result<TrainSummary> {
        Ok(serde_json::from_value(m.metric_summary.expect("training manifests carry a summary"))?)
    };
    Ok(PipelineOutput {
        sft_summary: summary(m_sft)?,
        rdpo_summary: summary(m_rdpo)?,
        data,
        sft,
        rdpo,
        eval_sft,
        eval_rdpo,
        compare,
        comparison,
    })
}
