//! Synthetic "radiograph" corpus.
//!
//! Every example pairs a `G x G` feature image with a templated report. Each
//! modeled finding owns a fixed, disjoint signature patch in the image and a
//! handful of interchangeable sentence phrasings. Reports list one sentence
//! per present finding in ascending finding order, with the phrasing chosen
//! uniformly at random, or a "no findings" sentence when nothing is present.
//!
//! The template table doubles as an exact labeler ([`Grammar::label_findings`])
//! and as an entity/relation extractor ([`Grammar::extract_graph`]).
//!
//! Sample `i` of a corpus is generated from its own ChaCha stream
//! (`seed`, stream `i`), so any sample can be regenerated in isolation and
//! parallel generation gives identical bytes.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exec::Exec;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Template table row for one finding.
#[derive(Debug)]
pub struct FindingTemplate {
    pub name: &'static str,
    pub sentences: [&'static str; 3],
    pub attributes: &'static [(&'static str, &'static str)],
    pub relations: &'static [(&'static str, &'static str, &'static str)],
}

// Sentence design: every first word is unique to its (finding, phrasing), and
// the word before "." is unique to its finding, so two tokens of context
// always determine the continuation within a sentence. No sentence occurs
// inside another one.
pub const FINDINGS: [FindingTemplate; 8] = [
    FindingTemplate {
        name: "cardiomegaly",
        sentences: ["heart is enlarged .", "cardiac silhouette enlarged .", "moderate cardiomegaly ."],
        attributes: &[("heart", "enlarged"), ("heart", "abnormal")],
        relations: &[("cardiomegaly", "located_at", "heart")],
    },
    FindingTemplate {
        name: "left_pleural_effusion",
        sentences: ["left pleural effusion .", "small left effusion .", "fluid blunts left angle ."],
        attributes: &[("effusion", "present"), ("effusion", "left")],
        relations: &[("effusion", "located_at", "left_pleura")],
    },
    FindingTemplate {
        name: "right_pleural_effusion",
        sentences: ["right pleural fluid .", "layering right fluid .", "dependent right meniscus ."],
        attributes: &[("effusion", "present"), ("effusion", "right")],
        relations: &[("effusion", "located_at", "right_pleura")],
    },
    FindingTemplate {
        name: "pneumothorax",
        sentences: ["pneumothorax is visible .", "apical pneumothorax .", "pleural air collection ."],
        attributes: &[("pneumothorax", "present")],
        relations: &[("pneumothorax", "located_at", "pleura")],
    },
    FindingTemplate {
        name: "right_lower_consolidation",
        sentences: ["consolidation in right base .", "basilar airspace opacity .", "focal right consolidation ."],
        attributes: &[("consolidation", "present"), ("consolidation", "right")],
        relations: &[("consolidation", "located_at", "right_lower_lobe")],
    },
    FindingTemplate {
        name: "pulmonary_edema",
        sentences: ["pulmonary edema .", "interstitial edema pattern .", "vascular congestion ."],
        attributes: &[("edema", "present")],
        relations: &[("edema", "located_at", "lungs")],
    },
    FindingTemplate {
        name: "left_lower_atelectasis",
        sentences: ["atelectasis in left lung .", "linear atelectasis .", "retrocardiac collapse ."],
        attributes: &[("atelectasis", "present"), ("atelectasis", "left")],
        relations: &[("atelectasis", "located_at", "left_lower_lobe")],
    },
    FindingTemplate {
        name: "lung_nodule",
        sentences: ["solitary nodule noted .", "a nodule is seen .", "nodular density ."],
        attributes: &[("nodule", "present")],
        relations: &[("nodule", "located_at", "lung")],
    },
];

pub const NO_FINDINGS: FindingTemplate = FindingTemplate {
    name: "no_findings",
    sentences: ["no acute findings .", "lungs are clear .", "normal chest ."],
    attributes: &[("lungs", "clear")],
    relations: &[("normal", "located_at", "lungs")],
};

/// Maximum supported finding count and phrasing count.
pub const MAX_FINDINGS: usize = FINDINGS.len();
pub const MAX_STYLES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_findings: usize,
    pub grid: usize,
    pub finding_prob: f64,
    pub style_variants: usize,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_findings: 8,
            grid: 16,
            finding_prob: 0.35,
            style_variants: 3,
            noise_sigma: 0.05,
            n_train: 2000,
            n_val: 200,
            n_test: 500,
            max_len: 48,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_findings == 0 || self.num_findings > MAX_FINDINGS {
            return bad(format!("num_findings must be in 1..={MAX_FINDINGS}, got {}", self.num_findings));
        }
        if self.style_variants == 0 || self.style_variants > MAX_STYLES {
            return bad(format!("style_variants must be in 1..={MAX_STYLES}, got {}", self.style_variants));
        }
        if self.grid < 4 {
            return bad(format!("grid must be at least 4, got {}", self.grid));
        }
        if !(self.finding_prob > 0.0 && self.finding_prob < 1.0) {
            return bad(format!("finding_prob must lie in (0, 1), got {}", self.finding_prob));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("n_train, n_val and n_test must all be at least 1".into());
        }
        // Longest possible report must fit.
        let longest: usize = FINDINGS[..self.num_findings]
            .iter()
            .map(|f| f.sentences[..self.style_variants].iter().map(|s| s.split(' ').count()).max().unwrap_or(0))
            .sum::<usize>()
            + 1;
        if self.max_len < longest {
            return bad(format!("max_len {} is shorter than the longest report ({longest} tokens)", self.max_len));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FindingSet {
    present: Vec<bool>,
}

impl FindingSet {
    pub fn empty(num_findings: usize) -> Self {
        Self {
            present: vec![false; num_findings],
        }
    }

    pub fn from_indices(num_findings: usize, indices: &[usize]) -> Result<Self> {
        let mut set = Self::empty(num_findings);
        for &i in indices {
            if i >= num_findings {
                return Err(Error::Data(format!("finding index {i} out of range 0..{num_findings}")));
            }
            set.present[i] = true;
        }
        Ok(set)
    }

    pub fn from_bits(present: Vec<bool>) -> Self {
        Self { present }
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn contains(&self, finding: usize) -> bool {
        self.present[finding]
    }

    pub fn insert(&mut self, finding: usize) {
        self.present[finding] = true;
    }

    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&b| b).count()
    }

    pub fn none_present(&self) -> bool {
        self.count() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        self.present.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn bits(&self) -> &[bool] {
        &self.present
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Array2<f64>,
    /// Ground truth; never shown to the model.
    pub findings: FindingSet,
}

impl ImageSample {
    pub fn grid(&self) -> usize {
        self.pixels.nrows()
    }

    /// Row-major flattening.
    pub fn flat(&self) -> &[f64] {
        self.pixels.as_slice().expect("image pixels are stored in standard layout")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Report {
    pub text: String,
    /// Word ids terminated by [`EOS`].
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub image: ImageSample,
    pub report: Report,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data(format!("vocabulary must start with {SPECIALS:?}")));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Closed vocabulary over every template sentence active under `cfg`:
    /// specials first, then words in lexicographic order.
    pub fn for_config(cfg: &CorpusConfig) -> Self {
        let words: BTreeSet<&str> = active_templates(cfg)
            .flat_map(|(_, t)| t.sentences[..cfg.style_variants].iter())
            .flat_map(|s| s.split(' '))
            .collect();
        let all = SPECIALS.iter().copied().chain(words).map(String::from).collect();
        Self::from_words(all).expect("template words never collide with specials")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// SHA-256 over the newline-joined word list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Word-level ids with [`EOS`] appended. No BOS is stored.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        out.push(vocab.id(w).ok_or_else(|| Error::UnknownWord(w.to_string()))?);
    }
    out.push(EOS);
    Ok(out)
}

/// Joins words with single spaces, stopping at the first EOS.
pub fn detokenize(tokens: &[usize], vocab: &Vocab) -> String {
    let mut out = String::new();
    for &t in strip_eos(tokens) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(vocab.word(t).unwrap_or("<unk>"));
    }
    out
}

/// Prefix before the first EOS.
pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(p) => &tokens[..p],
        None => tokens,
    }
}

/// `(finding index or None for the no-findings row, template)` for every
/// template in play under `cfg`.
fn active_templates(cfg: &CorpusConfig) -> impl Iterator<Item = (Option<usize>, &'static FindingTemplate)> {
    FINDINGS[..cfg.num_findings]
        .iter()
        .enumerate()
        .map(|(i, t)| (Some(i), t))
        .chain(std::iter::once((None, &NO_FINDINGS)))
}

/// Entity/attribute pairs and entity/relation/entity triples of a report.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReportGraph {
    pub entities: BTreeSet<(&'static str, &'static str)>,
    pub relations: BTreeSet<(&'static str, &'static str, &'static str)>,
}

impl ReportGraph {
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relations.is_empty()
    }
}

struct CompiledSentence {
    finding: Option<usize>,
    tokens: Vec<usize>,
    template: &'static FindingTemplate,
}

/// Template grammar compiled against a vocabulary: renders finding sets to
/// reports and inverts reports back to findings and graphs.
pub struct Grammar {
    cfg: CorpusConfig,
    vocab: Vocab,
    sentences: Vec<CompiledSentence>,
}

impl Grammar {
    pub fn new(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::for_config(cfg);
        let mut sentences = Vec::new();
        for (finding, template) in active_templates(cfg) {
            for s in &template.sentences[..cfg.style_variants] {
                let mut tokens = tokenize(s, &vocab)?;
                tokens.pop();
                sentences.push(CompiledSentence {
                    finding,
                    tokens,
                    template,
                });
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            sentences,
        })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Report for `findings`, using `styles[k]` as the phrasing of the k-th
    /// sentence. Panics if `styles` is shorter than the sentence count.
    pub fn render(&self, findings: &FindingSet, styles: &[usize]) -> Report {
        let mut parts: Vec<&str> = Vec::new();
        if findings.none_present() {
            parts.push(NO_FINDINGS.sentences[styles[0]]);
        } else {
            for (k, f) in findings.indices().into_iter().enumerate() {
                parts.push(FINDINGS[f].sentences[styles[k]]);
            }
        }
        let text = parts.join(" ");
        let tokens = tokenize(&text, &self.vocab).expect("rendered text uses template words only");
        Report { text, tokens }
    }

    fn matched<'a>(&'a self, tokens: &'a [usize]) -> impl Iterator<Item = &'a CompiledSentence> + 'a {
        let body = strip_eos(tokens);
        self.sentences
            .iter()
            .filter(move |s| body.windows(s.tokens.len()).any(|w| w == s.tokens.as_slice()))
    }

    /// Finding `f` is present iff one of its phrasings occurs contiguously.
    pub fn label_findings(&self, tokens: &[usize]) -> FindingSet {
        let mut set = FindingSet::empty(self.cfg.num_findings);
        for s in self.matched(tokens) {
            if let Some(f) = s.finding {
                set.insert(f);
            }
        }
        set
    }

    /// Union of the template-table tuples of every matched sentence.
    pub fn extract_graph(&self, tokens: &[usize]) -> ReportGraph {
        let mut g = ReportGraph::default();
        for s in self.matched(tokens) {
            g.entities.extend(s.template.attributes.iter().copied());
            g.relations.extend(s.template.relations.iter().copied());
        }
        g
    }

    /// Draws one example from `rng`.
    pub fn generate_sample(&self, rng: &mut impl Rng, id: String) -> Example {
        let cfg = &self.cfg;
        let mut findings = FindingSet::empty(cfg.num_findings);
        for f in 0..cfg.num_findings {
            if rng.random::<f64>() < cfg.finding_prob {
                findings.insert(f);
            }
        }
        let mut pixels = Array2::<f64>::zeros((cfg.grid, cfg.grid));
        for f in findings.indices() {
            stamp_signature(&mut pixels, f);
        }
        if cfg.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
            for p in pixels.iter_mut() {
                *p += noise.sample(rng);
            }
        }
        pixels.mapv_inplace(|p| p.clamp(0.0, 1.0));
        let sentences = findings.count().max(1);
        let styles: Vec<usize> = (0..sentences).map(|_| rng.random_range(0..cfg.style_variants)).collect();
        let report = self.render(&findings, &styles);
        Example {
            id,
            image: ImageSample { pixels, findings },
            report,
        }
    }

    /// Example at global index `index`, generated from its own stream.
    pub fn sample_at(&self, split: Split, index: usize) -> Example {
        let mut rng = sample_rng(self.cfg.seed, index as u64);
        self.generate_sample(&mut rng, format!("{}-{index:06}", split.name()))
    }

    pub fn generate_split(&self, split: Split, exec: Exec) -> Vec<Example> {
        exec.map_range(split.range(&self.cfg), |i| self.sample_at(split, i))
    }

    /// Noise-free image carrying exactly `findings`.
    pub fn clean_image(&self, findings: &FindingSet) -> ImageSample {
        let mut pixels = Array2::<f64>::zeros((self.cfg.grid, self.cfg.grid));
        for f in findings.indices() {
            stamp_signature(&mut pixels, f);
        }
        ImageSample {
            pixels,
            findings: findings.clone(),
        }
    }
}

/// ChaCha8 keyed by the corpus seed, one stream per sample index.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Finding `f` occupies block `(2 * (f / 4), f % 4)` of a 4x4 block layout,
/// filled with a two-level checker whose phase depends on `f`.
fn stamp_signature(pixels: &mut Array2<f64>, finding: usize) {
    let block = pixels.nrows() / 4;
    let r0 = 2 * (finding / 4) * block;
    let c0 = (finding % 4) * block;
    for i in 0..block {
        for j in 0..block {
            let v = if (i + j + finding) % 2 == 0 { 1.0 } else { 0.6 };
            pixels[[r0 + i, c0 + j]] += v;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}; expected train, val or test"))),
        }
    }

    /// Global sample indices: train, then val, then test.
    pub fn range(self, cfg: &CorpusConfig) -> std::ops::Range<usize> {
        match self {
            Split::Train => 0..cfg.n_train,
            Split::Val => cfg.n_train..cfg.n_train + cfg.n_val,
            Split::Test => cfg.n_train + cfg.n_val..cfg.n_train + cfg.n_val + cfg.n_test,
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

/// In-memory corpus loaded from disk.
pub struct Corpus {
    pub grammar: Grammar,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig, exec: Exec) -> Result<Self> {
        let grammar = Grammar::new(cfg)?;
        let train = grammar.generate_split(Split::Train, exec);
        let val = grammar.generate_split(Split::Val, exec);
        let test = grammar.generate_split(Split::Test, exec);
        Ok(Self {
            grammar,
            train,
            val,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        self.grammar.vocab()
    }

    pub fn config(&self) -> &CorpusConfig {
        self.grammar.config()
    }

    /// Writes `train/val/test.jsonl`, `vocab.json` and `config.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for ex in self.split(split) {
                writeln!(w, "{}", example_to_json_line(ex)).map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        let vocab = serde_json::to_string_pretty(&VocabFile::from(self.vocab()))?;
        write_file(&dir.join(VOCAB_FILE), vocab.as_bytes())?;
        let config = serde_json::to_string_pretty(self.config())?;
        write_file(&dir.join(CONFIG_FILE), config.as_bytes())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let cfg: CorpusConfig = serde_json::from_slice(&read_file(&dir.join(CONFIG_FILE))?)
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join(CONFIG_FILE).display())))?;
        let grammar = Grammar::new(&cfg)?;
        let vocab_file: VocabFile = serde_json::from_slice(&read_file(&dir.join(VOCAB_FILE))?)
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join(VOCAB_FILE).display())))?;
        let vocab = vocab_file.into_vocab()?;
        if &vocab != grammar.vocab() {
            return Err(Error::Data("vocab.json does not match the template grammar of config.json".into()));
        }
        let mut splits = Vec::with_capacity(3);
        for split in Split::ALL {
            splits.push(read_examples(&dir.join(split.file_name()), &grammar)?);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Self {
            grammar,
            train,
            val,
            test,
        })
    }
}

pub const VOCAB_FILE: &str = "vocab.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
    hash: String,
}

impl From<&Vocab> for VocabFile {
    fn from(v: &Vocab) -> Self {
        Self {
            words: v.words().to_vec(),
            hash: v.hash(),
        }
    }
}

impl VocabFile {
    fn into_vocab(self) -> Result<Vocab> {
        let vocab = Vocab::from_words(self.words)?;
        if vocab.hash() != self.hash {
            return Err(Error::Data("vocab.json hash does not match its word list".into()));
        }
        Ok(vocab)
    }
}

/// Reads the word table of a corpus directory.
pub fn read_vocab(dir: &Path) -> Result<Vocab> {
    let file: VocabFile = serde_json::from_slice(&read_file(&dir.join(VOCAB_FILE))?)?;
    file.into_vocab()
}

/// `{:.16e}` gives 17 significant digits.
fn fmt_f64(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String");
}

/// One JSONL record: `{"id", "image", "report", "findings"}`.
pub fn example_to_json_line(ex: &Example) -> String {
    let mut s = String::with_capacity(ex.image.pixels.len() * 24 + 128);
    s.push_str("{\"id\":");
    s.push_str(&serde_json::to_string(&ex.id).expect("string serialization"));
    s.push_str(",\"image\":[");
    for (r, row) in ex.image.pixels.rows().into_iter().enumerate() {
        if r > 0 {
            s.push(',');
        }
        s.push('[');
        for (c, &v) in row.iter().enumerate() {
            if c > 0 {
                s.push(',');
            }
            fmt_f64(&mut s, v);
        }
        s.push(']');
    }
    s.push_str("],\"report\":");
    s.push_str(&serde_json::to_string(&ex.report.text).expect("string serialization"));
    s.push_str(",\"findings\":");
    s.push_str(&serde_json::to_string(&ex.image.findings.indices()).expect("index list serialization"));
    s.push('}');
    s
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    id: String,
    image: Vec<Vec<f64>>,
    report: String,
    findings: Vec<usize>,
}

pub fn example_from_json_line(line: &str, grammar: &Grammar) -> Result<Example> {
    let rec: ExampleRecord = serde_json::from_str(line)?;
    let cfg = grammar.config();
    let g = cfg.grid;
    if rec.image.len() != g || rec.image.iter().any(|r| r.len() != g) {
        return Err(Error::Data(format!("example {}: image is not {g}x{g}", rec.id)));
    }
    let pixels = Array2::from_shape_vec((g, g), rec.image.into_iter().flatten().collect())
        .map_err(|e| Error::Data(format!("example {}: {e}", rec.id)))?;
    let findings = FindingSet::from_indices(cfg.num_findings, &rec.findings)?;
    let tokens = tokenize(&rec.report, grammar.vocab())?;
    Ok(Example {
        id: rec.id,
        image: ImageSample { pixels, findings },
        report: Report {
            text: rec.report,
            tokens,
        },
    })
}

pub fn read_examples(path: &Path, grammar: &Grammar) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = example_from_json_line(&line, grammar)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
