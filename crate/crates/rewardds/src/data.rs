//! Tokens, texts, corpora, and the built-in toy task.
//!
//! The vocabulary is fixed at 100 ids: four specials (PAD, BOS, EOS, SEP)
//! followed by 96 printable characters ('\n' plus ASCII 0x20..=0x7E). The
//! character-level mapping keeps model internals and attack outputs
//! directly inspectable.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit;
use crate::rng::Stream;

/// Total vocabulary size: 4 specials + 96 printable characters.
pub const VOCAB_SIZE: usize = 100;

pub const PAD: Token = Token(0);
pub const BOS: Token = Token(1);
pub const EOS: Token = Token(2);
pub const SEP: Token = Token(3);

const FIRST_CHAR_ID: u32 = 4;
/// Number of supported printable characters.
pub const CHAR_COUNT: usize = VOCAB_SIZE - FIRST_CHAR_ID as usize;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unsupported character {ch:?} at position {pos}")]
    UnsupportedChar { ch: char, pos: usize },
    #[error("special token {token:?} at position {pos} cannot be detokenized")]
    SpecialInText { token: Token, pos: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("toy corpus must contain at least one record")]
    EmptyToyCorpus,
    #[error("invalid toy task spec: {0}")]
    InvalidToySpec(String),
}

// ---------------------------------------------------------------------------
// Tokens
// ---------------------------------------------------------------------------

/// A vocabulary id in [0, VOCAB_SIZE). Ids 0..=3 are the reserved specials;
/// every other id maps 1:1 to a printable character.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn is_special(self) -> bool {
        self.0 < FIRST_CHAR_ID
    }

    /// Token for a supported printable character.
    pub fn from_char(c: char) -> Option<Token> {
        if c == '\n' {
            Some(Token(FIRST_CHAR_ID))
        } else {
            let b = u32::from(c);
            if (0x20..=0x7E).contains(&b) {
                Some(Token(FIRST_CHAR_ID + 1 + (b - 0x20)))
            } else {
                None
            }
        }
    }

    /// Character for a non-special token.
    pub fn to_char(self) -> Option<char> {
        if self.0 == FIRST_CHAR_ID {
            Some('\n')
        } else if self.0 > FIRST_CHAR_ID && self.id() < VOCAB_SIZE {
            char::from_u32(0x20 + (self.0 - FIRST_CHAR_ID - 1))
        } else {
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Text
// ---------------------------------------------------------------------------

/// A finite token sequence. PAD never appears inside a `Text`; padding is a
/// model-internal windowing concern.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Text(Vec<Token>);

impl Text {
    pub fn new(tokens: Vec<Token>) -> Text {
        debug_assert!(!tokens.contains(&PAD), "PAD inside a Text");
        Text(tokens)
    }

    pub fn empty() -> Text {
        Text(Vec::new())
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, t: Token) {
        debug_assert!(t != PAD);
        self.0.push(t);
    }

    /// Concatenation, reallocating.
    pub fn concat(&self, other: &Text) -> Text {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        Text(v)
    }

    /// Lossless rendering for audit output: specials become visible markers.
    /// Inverse of `tokenize` only for texts without specials.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.len());
        for t in &self.0 {
            match *t {
                PAD => s.push_str("\u{27e8}pad\u{27e9}"),
                BOS => s.push_str("\u{27e8}bos\u{27e9}"),
                EOS => s.push_str("\u{27e8}eos\u{27e9}"),
                SEP => s.push_str("\u{27e8}sep\u{27e9}"),
                t => s.push(t.to_char().expect("non-special token maps to a char")),
            }
        }
        s
    }
}

impl fmt::Display for Text {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Character string -> token sequence. Rejects anything outside the
/// supported printable set, naming the offending character and position.
pub fn tokenize(s: &str) -> Result<Text, DataError> {
    let mut tokens = Vec::with_capacity(s.len());
    for (pos, ch) in s.chars().enumerate() {
        match Token::from_char(ch) {
            Some(t) => tokens.push(t),
            None => return Err(DataError::UnsupportedChar { ch, pos }),
        }
    }
    Ok(Text(tokens))
}

/// Token sequence -> character string. Strict inverse of `tokenize`:
/// specials are an error (use [`Text::render`] for audit output).
pub fn detokenize(text: &Text) -> Result<String, DataError> {
    let mut s = String::with_capacity(text.len());
    for (pos, t) in text.tokens().iter().enumerate() {
        match t.to_char() {
            Some(c) => s.push(c),
            None => return Err(DataError::SpecialInText { token: *t, pos }),
        }
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Records and corpora
// ---------------------------------------------------------------------------

/// A (query, response) pair; the unit of private and synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub query: Text,
    pub response: Text,
    /// Optional id carried verbatim through load/save.
    pub id: Option<String>,
}

impl Record {
    pub fn new(query: Text, response: Text) -> Record {
        Record {
            query,
            response,
            id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    PrivateTrain,
    Dev,
    Test,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub split: Split,
}

impl Corpus {
    pub fn new(records: Vec<Record>, split: Split) -> Corpus {
        Corpus { records, split }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn line_err(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Line {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Load a JSON Lines corpus: one object per line with string fields
/// "query" and "response", optional "id". Record order is preserved.
pub fn load_corpus(path: &Path, split: Split) -> Result<Corpus, DataError> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| line_err(path, line_no, format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| line_err(path, line_no, "expected a JSON object"))?;
        let field = |name: &str| -> Result<String, DataError> {
            let v = obj
                .get(name)
                .ok_or_else(|| line_err(path, line_no, format!("missing field \"{name}\"")))?;
            v.as_str()
                .map(str::to_owned)
                .ok_or_else(|| line_err(path, line_no, format!("field \"{name}\" must be a string")))
        };
        let query = tokenize(&field("query")?)
            .map_err(|e| line_err(path, line_no, format!("in \"query\": {e}")))?;
        let response = tokenize(&field("response")?)
            .map_err(|e| line_err(path, line_no, format!("in \"response\": {e}")))?;
        if query.is_empty() {
            return Err(line_err(path, line_no, "empty \"query\""));
        }
        let id = match obj.get("id") {
            None => None,
            Some(v) => Some(
                v.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| line_err(path, line_no, "field \"id\" must be a string"))?,
            ),
        };
        records.push(Record {
            query,
            response,
            id,
        });
    }
    Ok(Corpus::new(records, split))
}

/// Write a corpus as JSON Lines, inverse of [`load_corpus`] on content.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for record in &corpus.records {
        let mut obj = serde_json::Map::new();
        obj.insert(
            "query".into(),
            serde_json::Value::String(detokenize(&record.query)?),
        );
        obj.insert(
            "response".into(),
            serde_json::Value::String(detokenize(&record.response)?),
        );
        if let Some(id) = &record.id {
            obj.insert("id".into(), serde_json::Value::String(id.clone()));
        }
        serde_json::to_writer(&mut w, &serde_json::Value::Object(obj))
            .map_err(|e| io_err(path, std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Greedy first-keep deduplication in corpus order. A record is dropped when
/// its concatenated query+response tokens reach ROUGE-L F1 >= `sim_threshold`
/// against any already-kept record.
pub fn dedup(corpus: &Corpus, sim_threshold: f64) -> Corpus {
    assert!(
        (0.0..=1.0).contains(&sim_threshold),
        "sim_threshold must be in [0, 1]"
    );
    let concat: Vec<Vec<Token>> = corpus
        .records
        .iter()
        .map(|r| {
            let mut v = r.query.tokens().to_vec();
            v.extend_from_slice(r.response.tokens());
            v
        })
        .collect();
    let mut kept_idx: Vec<usize> = Vec::new();
    for j in 0..corpus.records.len() {
        let duplicate = kept_idx
            .iter()
            .any(|&i| evalkit::lcs_f1(&concat[i], &concat[j]) >= sim_threshold);
        if !duplicate {
            kept_idx.push(j);
        }
    }
    Corpus::new(
        kept_idx
            .into_iter()
            .map(|i| corpus.records[i].clone())
            .collect(),
        corpus.split,
    )
}

// ---------------------------------------------------------------------------
// Toy task
// ---------------------------------------------------------------------------

/// Bijective string transforms with an exact gold oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTransform {
    Reverse,
    Duplicate,
    Rotate1,
}

impl ToyTransform {
    pub fn apply(self, query: &Text) -> Text {
        let t = query.tokens();
        let out = match self {
            ToyTransform::Reverse => t.iter().rev().copied().collect(),
            ToyTransform::Duplicate => {
                let mut v = t.to_vec();
                v.extend_from_slice(t);
                v
            }
            ToyTransform::Rotate1 => {
                if t.len() <= 1 {
                    t.to_vec()
                } else {
                    let mut v = t[1..].to_vec();
                    v.push(t[0]);
                    v
                }
            }
        };
        Text::new(out)
    }
}

/// Desk-scale stand-in for a private domain dataset.
///
/// With `shift_case` the response register is disjoint from the query
/// register (lowercase queries, uppercase responses), giving responses a
/// domain style that a token-level reward model can actually assess.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub transform: ToyTransform,
    pub alphabet_size: usize,
    pub query_len_range: (usize, usize),
    /// Map response characters to uppercase after the transform
    /// (requires an all-lowercase alphabet, alphabet_size <= 26).
    #[serde(default)]
    pub shift_case: bool,
    pub seed: u64,
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let (min, max) = self.query_len_range;
        if min < 1 {
            return Err(DataError::InvalidToySpec("min query length must be >= 1".into()));
        }
        if max < min {
            return Err(DataError::InvalidToySpec(
                "max query length must be >= min".into(),
            ));
        }
        if self.alphabet_size < 1 || self.alphabet_size > CHAR_COUNT {
            return Err(DataError::InvalidToySpec(format!(
                "alphabet_size must be in [1, {CHAR_COUNT}]"
            )));
        }
        if self.shift_case && self.alphabet_size > 26 {
            return Err(DataError::InvalidToySpec(
                "shift_case requires alphabet_size <= 26 (lowercase letters)".into(),
            ));
        }
        Ok(())
    }

    /// The i-th query-alphabet token. Ordering: a-z, A-Z, 0-9, remaining
    /// printables by code point, '\n' last.
    pub fn alphabet_token(&self, i: usize) -> Token {
        debug_assert!(i < self.alphabet_size);
        Token::from_char(toy_alphabet()[i]).expect("alphabet chars are supported")
    }

    /// The i-th response-alphabet token: uppercase of the query alphabet
    /// under `shift_case`, the query alphabet itself otherwise.
    pub fn response_alphabet_token(&self, i: usize) -> Token {
        debug_assert!(i < self.alphabet_size);
        let c = toy_alphabet()[i];
        let c = if self.shift_case {
            c.to_ascii_uppercase()
        } else {
            c
        };
        Token::from_char(c).expect("alphabet chars are supported")
    }

    /// The gold response for a query: the transform, then the optional
    /// register shift. Bijective either way.
    pub fn gold_response(&self, query: &Text) -> Text {
        let transformed = self.transform.apply(query);
        if !self.shift_case {
            return transformed;
        }
        Text::new(
            transformed
                .tokens()
                .iter()
                .map(|t| {
                    let c = t.to_char().expect("toy tokens are characters");
                    Token::from_char(c.to_ascii_uppercase()).expect("uppercase is supported")
                })
                .collect(),
        )
    }
}

fn toy_alphabet() -> Vec<char> {
    let mut v: Vec<char> = ('a'..='z').collect();
    v.extend('A'..='Z');
    v.extend('0'..='9');
    v.extend((0x20u8..=0x7E).map(char::from).filter(|c| !c.is_ascii_alphanumeric()));
    v.push('\n');
    debug_assert_eq!(v.len(), CHAR_COUNT);
    v
}

/// Deterministically generate `n` toy records: queries uniform over the
/// alphabet within the length range, responses exactly transform(query).
pub fn gen_toy_corpus(spec: &ToyTaskSpec, n: usize) -> Result<Corpus, DataError> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::EmptyToyCorpus);
    }
    let (min, max) = spec.query_len_range;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut stream = Stream::derived(spec.seed, "toy_record", i as u64);
        let len = min + stream.index(max - min + 1);
        let query = Text::new(
            (0..len)
                .map(|_| spec.alphabet_token(stream.index(spec.alphabet_size)))
                .collect(),
        );
        let response = spec.gold_response(&query);
        records.push(Record::new(query, response));
    }
    Ok(Corpus::new(records, Split::PrivateTrain))
}

/// Exact correctness predicate: candidate must equal the gold response
/// token for token.
pub fn toy_correct(spec: &ToyTaskSpec, query: &Text, candidate: &Text) -> bool {
    spec.gold_response(query) == *candidate
}
