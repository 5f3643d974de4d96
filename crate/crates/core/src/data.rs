//! Documents, synthetic benchmarks with known rationales, JSONL I/O, TF-IDF
//! span preselection, vocabularies and padded batches.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(String),
    Value(f64),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => f.write_str(c),
            Label::Value(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<Vec<String>>,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_mask: Option<Vec<u8>>,
    /// One entry per token of the concatenated sentences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_token_mask: Option<Vec<u8>>,
}

impl Document {
    pub fn validate(&self) -> Result<()> {
        if self.sentences.is_empty() {
            return Err(Error::Data(format!("document {} has no sentences", self.id)));
        }
        if let Some(g) = &self.gold_mask {
            if g.len() != self.sentences.len() {
                return Err(Error::Data(format!(
                    "document {}: gold_mask has {} entries for {} sentences",
                    self.id,
                    g.len(),
                    self.sentences.len()
                )));
            }
        }
        if let Some(g) = &self.gold_token_mask {
            if g.len() != self.num_tokens() {
                return Err(Error::Data(format!(
                    "document {}: gold_token_mask has {} entries for {} tokens",
                    self.id,
                    g.len(),
                    self.num_tokens()
                )));
            }
        }
        if let Label::Value(v) = self.label {
            if !v.is_finite() {
                return Err(Error::Data(format!("document {}: non-finite label", self.id)));
            }
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn has_gold(&self) -> bool {
        self.gold_mask.is_some() || self.gold_token_mask.is_some()
    }

    /// Gold rationale at token level: the explicit token mask when present,
    /// otherwise the sentence mask expanded to every token of each sentence.
    pub fn gold_tokens(&self) -> Option<Vec<u8>> {
        if let Some(t) = &self.gold_token_mask {
            return Some(t.clone());
        }
        self.gold_mask
            .as_ref()
            .map(|g| expand_sentence_mask(&self.sentences, g))
    }
}

/// Marks every token of each selected sentence.
pub fn expand_sentence_mask(sentences: &[Vec<String>], mask: &[u8]) -> Vec<u8> {
    sentences
        .iter()
        .zip(mask)
        .flat_map(|(s, &m)| std::iter::repeat_n(m, s.len()))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Sentence,
    Token,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(Self::Sentence),
            "token" => Ok(Self::Token),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let doc: Document = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        doc.validate().map_err(|e| parse_err(e.to_string()))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn save_jsonl(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        let line = serde_json::to_string(d).expect("documents serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Labels and vocabulary
// ---------------------------------------------------------------------------

/// Class names sorted lexicographically; the index is the class id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub classes: Vec<String>,
}

impl LabelSpace {
    /// `None` when every label is numeric (regression).
    pub fn from_docs(docs: &[Document]) -> Result<Option<Self>> {
        let mut classes = BTreeSet::new();
        let mut numeric = 0;
        for d in docs {
            match &d.label {
                Label::Class(c) => {
                    classes.insert(c.clone());
                }
                Label::Value(_) => numeric += 1,
            }
        }
        match (classes.is_empty(), numeric) {
            (true, _) => Ok(None),
            (false, 0) => Ok(Some(Self {
                classes: classes.into_iter().collect(),
            })),
            _ => Err(Error::Data("dataset mixes class and numeric labels".into())),
        }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(name)).ok()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Vocabulary over the given (training) documents, tokens sorted.
    pub fn build(docs: &[Document]) -> Self {
        let mut set = BTreeSet::new();
        for d in docs {
            for s in d.sentences.iter().chain(d.query.iter()) {
                for t in s {
                    set.insert(t.as_str());
                }
            }
        }
        set.remove(PAD_TOKEN);
        set.remove(UNK_TOKEN);
        let tokens = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(set)
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens).expect("reserved tokens are first")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Data(format!(
                "vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = self.tokens.join("\n");
        body.push('\n');
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(body.lines().map(str::to_owned).collect())
    }
}

// ---------------------------------------------------------------------------
// Synthetic benchmarks
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    #[default]
    Classification,
    Regression,
    Distractor,
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Self::Classification),
            "regression" => Ok(Self::Regression),
            "distractor" => Ok(Self::Distractor),
            other => Err(Error::Config(format!("unknown synthetic task {other:?}"))),
        }
    }
}

/// Number of tokens reserved per class for signal (and distractor) sets.
pub const SIGNAL_TOKENS_PER_CLASS: usize = 4;
/// Probability that a distractor token names the document's own class.
pub const DISTRACTOR_AGREEMENT: f64 = 0.75;
const MIN_FILLER: usize = 8;
const MAX_RATING: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: SynthTask,
    pub n_sentences: usize,
    pub sentence_len: usize,
    pub signal_fraction: f64,
    pub vocab_size: usize,
    pub distractor_rate: f64,
    pub num_classes: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            task: SynthTask::Classification,
            n_sentences: 10,
            sentence_len: 6,
            signal_fraction: 0.2,
            vocab_size: 60,
            distractor_rate: 0.0,
            num_classes: 2,
            num_train: 2000,
            num_val: 200,
            num_test: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplits {
    pub train: Vec<Document>,
    pub val: Vec<Document>,
    pub test: Vec<Document>,
}

/// Token-level layout of a synthetic vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthLexicon {
    pub signal: Vec<Vec<String>>,
    pub distractor: Vec<Vec<String>>,
    pub ratings: Vec<String>,
    pub filler: Vec<String>,
}

impl SynthSpec {
    pub fn gold_count(&self) -> usize {
        ceil_count(self.signal_fraction, self.n_sentences).clamp(1, self.n_sentences)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sentences == 0 || self.sentence_len == 0 {
            return Err(Error::Config("n_sentences and sentence_len must be positive".into()));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction < 1.0) {
            return Err(Error::Config(format!(
                "signal_fraction must lie in (0, 1), got {}",
                self.signal_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.distractor_rate) {
            return Err(Error::Config(format!(
                "distractor_rate must lie in [0, 1), got {}",
                self.distractor_rate
            )));
        }
        if self.task != SynthTask::Regression && self.num_classes < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        self.lexicon().map(|_| ())
    }

    pub fn lexicon(&self) -> Result<SynthLexicon> {
        let classes = if self.task == SynthTask::Regression { 0 } else { self.num_classes };
        let per_class = SIGNAL_TOKENS_PER_CLASS;
        let signal_n = classes * per_class;
        let distractor_n = if self.task == SynthTask::Distractor { signal_n } else { 0 };
        let ratings_n = if self.task == SynthTask::Regression { MAX_RATING + 1 } else { 0 };
        let reserved = signal_n + distractor_n + ratings_n;
        if self.vocab_size < reserved + MIN_FILLER {
            return Err(Error::Config(format!(
                "vocab_size {} too small: {reserved} signal tokens need at least {MIN_FILLER} filler tokens besides",
                self.vocab_size
            )));
        }
        let signal = (0..classes)
            .map(|c| (0..per_class).map(|k| format!("sig{c}_{k}")).collect())
            .collect();
        let distractor = (0..if distractor_n > 0 { classes } else { 0 })
            .map(|c| (0..per_class).map(|k| format!("dis{c}_{k}")).collect())
            .collect();
        let ratings = (0..ratings_n).map(|v| format!("val{v}")).collect();
        let filler = (0..self.vocab_size - reserved).map(|i| format!("w{i}")).collect();
        Ok(SynthLexicon {
            signal,
            distractor,
            ratings,
            filler,
        })
    }

    pub fn class_name(c: usize) -> String {
        format!("class{c}")
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthSplits> {
    spec.validate()?;
    let lex = spec.lexicon()?;
    let root = Rng::new(spec.seed, "synth");
    let split = |name: &str, count: usize| {
        let mut rng = root.split(name);
        (0..count)
            .map(|i| generate_doc(spec, &lex, &format!("{name}-{i:06}"), &mut rng))
            .collect::<Vec<_>>()
    };
    Ok(SynthSplits {
        train: split("train", spec.num_train),
        val: split("val", spec.num_val),
        test: split("test", spec.num_test),
    })
}

fn generate_doc(spec: &SynthSpec, lex: &SynthLexicon, id: &str, rng: &mut Rng) -> Document {
    let n = spec.n_sentences;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut gold = vec![0u8; n];
    for &j in &order[..spec.gold_count()] {
        gold[j] = 1;
    }
    let mut sentences: Vec<Vec<String>> = (0..n)
        .map(|_| {
            (0..spec.sentence_len)
                .map(|_| lex.filler[rng.below(lex.filler.len())].clone())
                .collect()
        })
        .collect();

    let label = match spec.task {
        SynthTask::Regression => {
            let mut total = 0.0;
            for (j, s) in sentences.iter_mut().enumerate() {
                if gold[j] == 1 {
                    let v = rng.below(MAX_RATING + 1);
                    total += v as f64;
                    let pos = rng.below(s.len());
                    s[pos] = lex.ratings[v].clone();
                }
            }
            Label::Value(total / spec.gold_count() as f64)
        }
        SynthTask::Classification | SynthTask::Distractor => {
            let class = rng.below(spec.num_classes);
            for (j, s) in sentences.iter_mut().enumerate() {
                if gold[j] == 1 {
                    let pos = rng.below(s.len());
                    s[pos] = lex.signal[class][rng.below(SIGNAL_TOKENS_PER_CLASS)].clone();
                } else if spec.task == SynthTask::Distractor && rng.bernoulli(spec.distractor_rate) {
                    let c = if rng.bernoulli(DISTRACTOR_AGREEMENT) {
                        class
                    } else {
                        let other = rng.below(spec.num_classes - 1);
                        if other >= class { other + 1 } else { other }
                    };
                    let pos = rng.below(s.len());
                    s[pos] = lex.distractor[c][rng.below(SIGNAL_TOKENS_PER_CLASS)].clone();
                }
            }
            Label::Class(SynthSpec::class_name(class))
        }
    };
    Document {
        id: id.to_owned(),
        sentences,
        query: None,
        label,
        gold_mask: Some(gold),
        gold_token_mask: None,
    }
}

// ---------------------------------------------------------------------------
// TF-IDF span preselection
// ---------------------------------------------------------------------------

fn tfidf_vector<'a>(
    tokens: impl Iterator<Item = &'a String>,
    idf: &dyn Fn(&str) -> f64,
) -> BTreeMap<&'a str, f64> {
    let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
    for t in tokens {
        *tf.entry(t.as_str()).or_default() += 1.0;
    }
    for (t, w) in tf.iter_mut() {
        *w *= idf(t);
    }
    tf
}

fn cosine(a: &BTreeMap<&str, f64>, b: &BTreeMap<&str, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(t, x)| b.get(t).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Contiguous window of `window` sentences whose TF-IDF vector is most
/// cosine-similar to the query. IDF is `log(N / (1 + df))` over the
/// document's sentences; the earliest window wins ties.
pub fn tfidf_span_select(doc: &Document, query: &[String], window: usize) -> Result<Range<usize>> {
    if window == 0 {
        return Err(Error::Domain("window must be at least 1".into()));
    }
    let n = doc.sentences.len();
    if window >= n {
        return Ok(0..n);
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    for s in &doc.sentences {
        let uniq: BTreeSet<&str> = s.iter().map(String::as_str).collect();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }
    let idf = |t: &str| (n as f64 / (1.0 + df.get(t).copied().unwrap_or(0) as f64)).ln();
    let qv = tfidf_vector(query.iter(), &idf);
    let mut best = (f64::NEG_INFINITY, 0);
    for start in 0..=n - window {
        let sv = tfidf_vector(doc.sentences[start..start + window].iter().flatten(), &idf);
        let score = cosine(&sv, &qv);
        if score > best.0 {
            best = (score, start);
        }
    }
    Ok(best.1..best.1 + window)
}

/// Restricts a document (and its gold masks) to a sentence range.
pub fn crop_to_span(doc: &Document, span: Range<usize>) -> Document {
    let token_start: usize = doc.sentences[..span.start].iter().map(Vec::len).sum();
    let token_len: usize = doc.sentences[span.clone()].iter().map(Vec::len).sum();
    Document {
        id: doc.id.clone(),
        sentences: doc.sentences[span.clone()].to_vec(),
        query: doc.query.clone(),
        label: doc.label.clone(),
        gold_mask: doc.gold_mask.as_ref().map(|g| g[span].to_vec()),
        gold_token_mask: doc
            .gold_token_mask
            .as_ref()
            .map(|g| g[token_start..token_start + token_len].to_vec()),
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Token ids of a group of units, padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitTokens {
    /// `[rows, len]` ids, PAD-filled.
    pub ids: Vec<usize>,
    /// `[rows, len]` mean-pooling weights; an empty unit puts weight 1 on its
    /// leading PAD slot.
    pub pool: Vec<f64>,
    pub first: Vec<usize>,
    pub last: Vec<usize>,
    pub rows: usize,
    pub len: usize,
}

impl UnitTokens {
    fn build(units: &[Vec<usize>], len: usize) -> Self {
        let rows = units.len();
        let mut ids = vec![PAD; rows * len];
        let mut pool = vec![0.0; rows * len];
        let mut first = Vec::with_capacity(rows);
        let mut last = Vec::with_capacity(rows);
        for (r, u) in units.iter().enumerate() {
            let u = &u[..u.len().min(len)];
            if u.is_empty() {
                pool[r * len] = 1.0;
                first.push(PAD);
                last.push(PAD);
                continue;
            }
            let w = 1.0 / u.len() as f64;
            for (k, &id) in u.iter().enumerate() {
                ids[r * len + k] = id;
                pool[r * len + k] = w;
            }
            first.push(u[0]);
            last.push(u[u.len() - 1]);
        }
        Self {
            ids,
            pool,
            first,
            last,
            rows,
            len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// Unit slots per document (max over the batch).
    pub units: usize,
    /// `[size * units]` unit token groups; PAD units are empty.
    pub tokens: UnitTokens,
    /// `[size, units]` 1.0 for real units, 0.0 for padding.
    pub valid: Vec<f64>,
    pub counts: Vec<usize>,
    pub query: Option<UnitTokens>,
    pub targets: Targets,
    /// `[size, units]` gold unit mask (0 where absent).
    pub gold: Vec<f64>,
    pub has_gold: Vec<bool>,
    /// Positions in the source slice.
    pub doc_index: Vec<usize>,
}

/// Per-document unit token ids under the requested granularity.
pub fn doc_units(doc: &Document, vocab: &Vocab, granularity: Granularity) -> Vec<Vec<usize>> {
    let ids = |s: &[String]| s.iter().map(|t| vocab.id(t)).collect::<Vec<_>>();
    match granularity {
        Granularity::Sentence => doc.sentences.iter().map(|s| ids(s)).collect(),
        Granularity::Token => doc.sentences.iter().flatten().map(|t| vec![vocab.id(t)]).collect(),
    }
}

/// Gold mask per unit under the requested granularity.
pub fn doc_unit_gold(doc: &Document, granularity: Granularity) -> Option<Vec<u8>> {
    match granularity {
        Granularity::Sentence => doc.gold_mask.clone().or_else(|| {
            // Sentence is gold when any of its tokens is.
            let t = doc.gold_token_mask.as_ref()?;
            let mut pos = 0;
            Some(
                doc.sentences
                    .iter()
                    .map(|s| {
                        let any = t[pos..pos + s.len()].contains(&1);
                        pos += s.len();
                        u8::from(any)
                    })
                    .collect(),
            )
        }),
        Granularity::Token => doc.gold_tokens(),
    }
}

pub fn label_target(doc: &Document, labels: Option<&LabelSpace>) -> Result<LabelTarget> {
    match (&doc.label, labels) {
        (Label::Class(c), Some(space)) => space
            .id(c)
            .map(LabelTarget::Class)
            .ok_or_else(|| Error::Data(format!("document {}: unknown label {c:?}", doc.id))),
        (Label::Value(v), None) => Ok(LabelTarget::Value(*v)),
        (Label::Class(_), None) => Err(Error::Data(format!(
            "document {}: class label in a regression dataset",
            doc.id
        ))),
        (Label::Value(_), Some(_)) => Err(Error::Data(format!(
            "document {}: numeric label in a classification dataset",
            doc.id
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelTarget {
    Class(usize),
    Value(f64),
}

/// Builds one padded batch from `docs[indices]`.
pub fn make_batch(
    docs: &[Document],
    indices: &[usize],
    vocab: &Vocab,
    labels: Option<&LabelSpace>,
    granularity: Granularity,
) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let per_doc: Vec<Vec<Vec<usize>>> = indices
        .iter()
        .map(|&i| doc_units(&docs[i], vocab, granularity))
        .collect();
    let units = per_doc.iter().map(Vec::len).max().unwrap_or(0);
    if units == 0 {
        return Err(Error::Data("batch without units".into()));
    }
    let len = per_doc
        .iter()
        .flatten()
        .map(Vec::len)
        .max()
        .unwrap_or(1)
        .max(1);
    let size = indices.len();
    let mut flat = Vec::with_capacity(size * units);
    let mut valid = vec![0.0; size * units];
    let mut gold = vec![0.0; size * units];
    let mut has_gold = Vec::with_capacity(size);
    let mut counts = Vec::with_capacity(size);
    for (b, (units_b, &i)) in per_doc.iter().zip(indices).enumerate() {
        counts.push(units_b.len());
        for u in 0..units {
            match units_b.get(u) {
                Some(ids) => {
                    flat.push(ids.clone());
                    valid[b * units + u] = 1.0;
                }
                None => flat.push(Vec::new()),
            }
        }
        let g = doc_unit_gold(&docs[i], granularity);
        has_gold.push(g.is_some());
        if let Some(g) = g {
            for (u, &v) in g.iter().enumerate().take(units) {
                gold[b * units + u] = f64::from(v);
            }
        }
    }
    let tokens = UnitTokens::build(&flat, len);

    let query = if indices.iter().any(|&i| docs[i].query.is_some()) {
        let q: Vec<Vec<usize>> = indices
            .iter()
            .map(|&i| {
                docs[i]
                    .query
                    .as_deref()
                    .map(|q| q.iter().map(|t| vocab.id(t)).collect())
                    .unwrap_or_default()
            })
            .collect();
        let qlen = q.iter().map(Vec::len).max().unwrap_or(1).max(1);
        Some(UnitTokens::build(&q, qlen))
    } else {
        None
    };

    let targets = match labels {
        Some(_) => Targets::Classes(
            indices
                .iter()
                .map(|&i| match label_target(&docs[i], labels)? {
                    LabelTarget::Class(c) => Ok(c),
                    LabelTarget::Value(_) => unreachable!("label space implies classes"),
                })
                .collect::<Result<_>>()?,
        ),
        None => Targets::Values(
            indices
                .iter()
                .map(|&i| match label_target(&docs[i], None)? {
                    LabelTarget::Value(v) => Ok(v),
                    LabelTarget::Class(_) => unreachable!("no label space implies values"),
                })
                .collect::<Result<_>>()?,
        ),
    };

    Ok(Batch {
        size,
        units,
        tokens,
        valid,
        counts,
        query,
        targets,
        gold,
        has_gold,
        doc_index: indices.to_vec(),
    })
}

/// Index chunks for one epoch; shuffled with `rng` when given.
pub fn epoch_batches(n: usize, batch_size: usize, rng: Option<&mut Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(r) = rng {
        r.shuffle(&mut order);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// `⌈f·n⌉`, tolerant of products like `0.3 * 10` that land just above an
/// integer.
pub fn ceil_count(f: f64, n: usize) -> usize {
    let x = f * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// First `⌈f·N⌉` documents by id order: those keep their gold rationale for
/// semi-supervised training.
pub fn supervised_ids(docs: &[Document], fraction: f64) -> BTreeSet<String> {
    let mut ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
    ids.sort_unstable();
    let k = ceil_count(fraction.clamp(0.0, 1.0), docs.len()).min(docs.len());
    ids[..k].iter().map(|s| (*s).to_owned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn small_spec(task: SynthTask) -> SynthSpec {
        SynthSpec {
            task,
            num_train: 50,
            num_val: 10,
            num_test: 200,
            ..SynthSpec::default()
        }
    }

    fn signal_class(tokens: &[String]) -> Option<usize> {
        tokens.iter().find_map(|t| {
            t.strip_prefix("sig")
                .and_then(|r| r.split('_').next())
                .and_then(|c| c.parse().ok())
        })
    }

    #[test]
    fn gold_count_is_ceiling() {
        let spec = SynthSpec {
            n_sentences: 10,
            signal_fraction: 0.2,
            ..small_spec(SynthTask::Classification)
        };
        let splits = generate(&spec).unwrap();
        for d in splits.train.iter().chain(&splits.test) {
            let g = d.gold_mask.as_ref().unwrap();
            assert_eq!(g.iter().filter(|&&v| v == 1).count(), 2);
        }
        let odd = SynthSpec {
            signal_fraction: 0.25,
            ..spec
        };
        assert_eq!(odd.gold_count(), 3);
    }

    #[test]
    fn oracles_on_generated_classification() {
        let splits = generate(&small_spec(SynthTask::Classification)).unwrap();
        let mut non_gold_hits = 0;
        for d in &splits.test {
            let Label::Class(label) = &d.label else { panic!() };
            let all: Vec<String> = d.sentences.concat();
            let full = signal_class(&all).map(SynthSpec::class_name);
            assert_eq!(full.as_ref(), Some(label));
            let gold = d.gold_mask.as_ref().unwrap();
            let gold_tokens: Vec<String> = d
                .sentences
                .iter()
                .zip(gold)
                .filter(|(_, &g)| g == 1)
                .flat_map(|(s, _)| s.clone())
                .collect();
            assert_eq!(signal_class(&gold_tokens).map(SynthSpec::class_name).as_ref(), Some(label));
            let rest: Vec<String> = d
                .sentences
                .iter()
                .zip(gold)
                .filter(|(_, &g)| g == 0)
                .flat_map(|(s, _)| s.clone())
                .collect();
            // Non-gold sentences carry no class evidence: the best they allow
            // is a constant guess.
            if signal_class(&rest).is_some() {
                non_gold_hits += 1;
            }
        }
        assert_eq!(non_gold_hits, 0);
    }

    #[test]
    fn regression_label_is_mean_rating() {
        let splits = generate(&small_spec(SynthTask::Regression)).unwrap();
        for d in &splits.test {
            let Label::Value(v) = d.label else { panic!() };
            let gold = d.gold_mask.as_ref().unwrap();
            let vals: Vec<f64> = d
                .sentences
                .iter()
                .zip(gold)
                .filter(|(_, &g)| g == 1)
                .map(|(s, _)| {
                    s.iter()
                        .find_map(|t| t.strip_prefix("val").and_then(|x| x.parse::<f64>().ok()))
                        .unwrap()
                })
                .collect();
            assert!((v - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn distractors_only_in_non_gold() {
        let spec = SynthSpec {
            distractor_rate: 0.3,
            ..small_spec(SynthTask::Distractor)
        };
        let splits = generate(&spec).unwrap();
        let mut seen = 0;
        for d in &splits.test {
            for (s, &g) in d.sentences.iter().zip(d.gold_mask.as_ref().unwrap()) {
                let has = s.iter().any(|t| t.starts_with("dis"));
                if g == 1 {
                    assert!(!has);
                }
                seen += usize::from(has);
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn vocab_too_small_is_error() {
        let spec = SynthSpec {
            vocab_size: 10,
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = small_spec(SynthTask::Distractor);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SynthSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().train, generate(&other).unwrap().train);
    }

    #[test]
    fn jsonl_round_trip_and_optional_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut docs = generate(&small_spec(SynthTask::Classification)).unwrap().val;
        docs[0].gold_mask = None;
        docs[1].query = Some(toks("what is it"));
        save_jsonl(&path, &docs).unwrap();
        let back = load_jsonl(&path).unwrap();
        assert_eq!(back, docs);
        assert!(back[0].gold_mask.is_none());
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"sentences\":[[\"x\"]],\"label\":\"P\",\"extra\":1}\n{\"id\":\"b\",\"sentences\":[[\"x\"]]}\n",
        )
        .unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(load_jsonl(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn label_ids_are_sorted() {
        let mk = |l: &str| Document {
            id: l.into(),
            sentences: vec![toks("a")],
            query: None,
            label: Label::Class(l.into()),
            gold_mask: None,
            gold_token_mask: None,
        };
        let docs = vec![mk("SUPPORTS"), mk("REFUTES"), mk("SUPPORTS")];
        let space = LabelSpace::from_docs(&docs).unwrap().unwrap();
        assert_eq!(space.id("REFUTES"), Some(0));
        assert_eq!(space.id("SUPPORTS"), Some(1));
    }

    fn doc_of(sentences: &[&str]) -> Document {
        Document {
            id: "d".into(),
            sentences: sentences.iter().map(|s| toks(s)).collect(),
            query: None,
            label: Label::Class("x".into()),
            gold_mask: Some((0..sentences.len()).map(|i| u8::from(i % 3 == 0)).collect()),
            gold_token_mask: None,
        }
    }

    #[test]
    fn tfidf_finds_query_sentence() {
        let d = doc_of(&[
            "a b", "c d", "e f", "g h", "i j", "k l", "m n", "needle o", "p q", "r s",
        ]);
        let span = tfidf_span_select(&d, &toks("needle"), 3).unwrap();
        assert!(span.contains(&7));
        assert_eq!(span.len(), 3);
        assert_eq!(tfidf_span_select(&d, &toks("absent"), 3).unwrap(), 0..3);
        assert_eq!(tfidf_span_select(&d, &toks("needle"), 10).unwrap(), 0..10);
        assert_eq!(tfidf_span_select(&d, &toks("needle"), 20).unwrap(), 0..10);
    }

    #[test]
    fn crop_keeps_masks_aligned() {
        let mut d = doc_of(&["a b", "c", "d e f", "g"]);
        d.gold_token_mask = Some(vec![0, 0, 1, 1, 1, 1, 0]);
        let c = crop_to_span(&d, 1..3);
        assert_eq!(c.sentences, vec![toks("c"), toks("d e f")]);
        assert_eq!(c.gold_mask, Some(vec![0, 0]));
        assert_eq!(c.gold_token_mask, Some(vec![1, 1, 1, 1]));
    }

    #[test]
    fn batch_pads_units_and_maps_unknowns() {
        let train = vec![doc_of(&["a b c", "d", "e f"])];
        let vocab = Vocab::build(&train);
        let mut other = doc_of(&["a zzz", "b", "c", "d", "e"]);
        other.gold_mask = None;
        let docs = vec![train[0].clone(), other];
        let labels = LabelSpace::from_docs(&docs).unwrap();
        let b = make_batch(&docs, &[0, 1], &vocab, labels.as_ref(), Granularity::Sentence).unwrap();
        assert_eq!(b.units, 5);
        assert_eq!(&b.valid[..5], &[1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.counts, vec![3, 5]);
        assert_eq!(b.has_gold, vec![true, false]);
        // second doc, first unit: "a zzz"
        let row = 5 * b.tokens.len;
        assert_eq!(b.tokens.ids[row + 1], UNK);
        // padded unit pools its PAD slot
        let pad_row = 3 * b.tokens.len;
        assert_eq!(b.tokens.pool[pad_row], 1.0);
        assert_eq!(b.tokens.ids[pad_row], PAD);
    }

    #[test]
    fn token_granularity_units() {
        let d = doc_of(&["a b", "c"]);
        let vocab = Vocab::build(std::slice::from_ref(&d));
        assert_eq!(doc_units(&d, &vocab, Granularity::Token).len(), 3);
        assert_eq!(doc_unit_gold(&d, Granularity::Token), Some(vec![1, 1, 0]));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(&[doc_of(&["b a", "c"])]);
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.id("a"), 2);
        assert_eq!(back.id(PAD_TOKEN), PAD);
    }

    #[test]
    fn epoch_shuffle_is_seeded() {
        let a = epoch_batches(100, 32, Some(&mut Rng::new(1, "e")));
        let b = epoch_batches(100, 32, Some(&mut Rng::new(1, "e")));
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a[3].len(), 4);
    }

    #[test]
    fn supervised_subset_is_stable() {
        let docs = generate(&small_spec(SynthTask::Classification)).unwrap().train;
        let ids = supervised_ids(&docs, 0.25);
        assert_eq!(ids.len(), 13);
        assert!(ids.contains("train-000000"));
        assert!(supervised_ids(&docs, 0.0).is_empty());
    }
}
