//! Vocabularies, phrase-table ingestion and minibatch sampling.
//!
//! Input text is assumed to be pre-tokenized: tokens are separated by
//! whitespace and nothing else is done to them.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type TokenId = usize;

pub const EOS: TokenId = 0;
pub const UNK: TokenId = 1;
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "[UNK]";

/// Field separator of the phrase-table format.
pub const DELIMITER: &str = " ||| ";

/// Shortlist vocabulary. Ids 0 and 1 are the reserved end-of-sequence and
/// unknown tokens; shortlist words follow in frequency order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    shortlist: usize,
}

impl Vocabulary {
    /// Vocabulary from an explicit word list, in id order after the
    /// reserved tokens.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens = vec![EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(EOS_TOKEN.to_string(), EOS);
        index.insert(UNK_TOKEN.to_string(), UNK);
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.to_string(), tokens.len()).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary word {w:?}")));
            }
            tokens.push(w.to_string());
        }
        Ok(Self {
            shortlist: tokens.len() - 2,
            tokens,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn shortlist(&self) -> usize {
        self.shortlist
    }

    /// Id of `token`, or [`UNK`] for anything outside the shortlist.
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Space-joined tokens of `ids`, without the terminating EOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let body = match ids.last() {
            Some(&EOS) => &ids[..ids.len() - 1],
            _ => ids,
        };
        body.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        for (line, want) in [EOS_TOKEN, UNK_TOKEN].iter().enumerate() {
            if lines.next() != Some(*want) {
                return Err(Error::Parse {
                    line: line + 1,
                    msg: format!("vocabulary file must start with {want}"),
                });
            }
        }
        let words: Vec<&str> = lines.collect();
        Self::from_words(&words)
    }
}

/// Keeps the `k` most frequent tokens. Ties go to the token seen first.
pub fn build_vocab<'a, I, S>(corpus: I, k: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str> + 'a,
{
    if k == 0 {
        return Err(Error::Parameter("shortlist size must be at least 1".into()));
    }
    // token -> (count, first occurrence)
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    let mut seen = 0usize;
    for line in corpus {
        for tok in line.as_ref().split_whitespace() {
            if tok == EOS_TOKEN || tok == UNK_TOKEN {
                continue;
            }
            let entry = counts.entry(tok.to_string()).or_insert((0, seen));
            entry.0 += 1;
            seen += 1;
        }
    }
    if counts.is_empty() {
        warn!("empty corpus: vocabulary holds only the reserved tokens");
    }
    let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1 .0
            .cmp(&a.1 .0)
            .then(a.1 .1.cmp(&b.1 .1))
            .then_with(|| a.0.cmp(&b.0))
    });
    let words: Vec<String> = ranked.into_iter().take(k).map(|(w, _)| w).collect();
    Vocabulary::from_words(&words)
}

/// Whitespace tokenization, shortlist lookup, EOS appended.
pub fn encode_phrase(text: &str, v: &Vocabulary) -> Vec<TokenId> {
    text.split_whitespace()
        .map(|t| v.id(t))
        .chain(std::iter::once(EOS))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhrasePair {
    pub src_text: String,
    pub tgt_text: String,
    pub src_ids: Vec<TokenId>,
    pub tgt_ids: Vec<TokenId>,
    pub features: Vec<f64>,
}

impl PhrasePair {
    pub fn new(src_text: &str, tgt_text: &str, v_src: &Vocabulary, v_tgt: &Vocabulary) -> Self {
        Self {
            src_text: src_text.to_string(),
            tgt_text: tgt_text.to_string(),
            src_ids: encode_phrase(src_text, v_src),
            tgt_ids: encode_phrase(tgt_text, v_tgt),
            features: Vec::new(),
        }
    }

    /// Pair built directly from ids, for callers that have no text.
    pub fn from_ids(src_ids: Vec<TokenId>, tgt_ids: Vec<TokenId>) -> Self {
        Self {
            src_text: String::new(),
            tgt_text: String::new(),
            src_ids,
            tgt_ids,
            features: Vec::new(),
        }
    }

    /// Target token count, EOS included.
    pub fn target_len(&self) -> usize {
        self.tgt_ids.len()
    }
}

/// One line of a phrase table: `src ||| tgt [||| features [||| ...]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseTableEntry {
    /// 1-based line number in the source file.
    pub line_no: usize,
    /// The line as read, without its terminator.
    pub raw: String,
    pub src_text: String,
    pub tgt_text: String,
    pub features: Vec<f64>,
    /// Fields after the feature field, kept verbatim.
    pub extra: Vec<String>,
}

impl PhraseTableEntry {
    pub fn parse(line: &str, line_no: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split(DELIMITER).collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected at least 2 fields separated by {DELIMITER:?}"),
            });
        }
        let features = match fields.get(2) {
            Some(f) => f
                .split_whitespace()
                .map(|x| {
                    x.parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("non-numeric feature {x:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(Self {
            line_no,
            raw: line.to_string(),
            src_text: fields[0].trim().to_string(),
            tgt_text: fields[1].trim().to_string(),
            features,
            extra: fields.iter().skip(3).map(|s| s.to_string()).collect(),
        })
    }

    pub fn to_line(&self) -> &str {
        &self.raw
    }

    pub fn to_pair(&self, v_src: &Vocabulary, v_tgt: &Vocabulary) -> PhrasePair {
        let mut p = PhrasePair::new(&self.src_text, &self.tgt_text, v_src, v_tgt);
        p.features = self.features.clone();
        p
    }

    /// The raw line with `value` appended to the feature field, creating
    /// the field if the line has none. Everything else is left untouched.
    pub fn with_appended_feature(&self, value: &str) -> String {
        let mut fields: Vec<&str> = self.raw.split(DELIMITER).collect();
        let appended;
        match fields.get(2) {
            Some(f) if f.is_empty() => {
                appended = value.to_string();
                fields[2] = &appended;
            }
            Some(f) => {
                appended = format!("{f} {value}");
                fields[2] = &appended;
            }
            None => {
                appended = value.to_string();
                fields.push(&appended);
            }
        }
        fields.join(DELIMITER)
    }
}

/// Lines that carry no entry: blank lines and `#` comments.
pub fn is_passthrough_line(line: &str) -> bool {
    line.trim().is_empty() || line.starts_with('#')
}

/// Splits `text` into lines, keeping each line's terminator (`"\n"`,
/// `"\r\n"` or `""` for an unterminated last line).
pub fn split_lines_keep_ends(text: &str) -> Vec<(&str, &str)> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        match rest.find('\n') {
            Some(i) => {
                let (line, end) = if i > 0 && rest.as_bytes()[i - 1] == b'\r' {
                    (&rest[..i - 1], &rest[i - 1..=i])
                } else {
                    (&rest[..i], &rest[i..=i])
                };
                out.push((line, end));
                rest = &rest[i + 1..];
            }
            None => {
                out.push((rest, ""));
                rest = "";
            }
        }
    }
    out
}

pub fn parse_phrase_table_str(text: &str) -> Result<Vec<PhraseTableEntry>> {
    split_lines_keep_ends(text)
        .into_iter()
        .enumerate()
        .filter(|(_, (line, _))| !is_passthrough_line(line))
        .map(|(i, (line, _))| PhraseTableEntry::parse(line, i + 1))
        .collect()
}

pub fn parse_phrase_table(path: &Path) -> Result<Vec<PhraseTableEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_phrase_table_str(&text)
}

/// Bilingual corpus, one `src<TAB>tgt` pair per line.
pub fn parse_bitext_str(text: &str) -> Result<Vec<(String, String)>> {
    split_lines_keep_ends(text)
        .into_iter()
        .enumerate()
        .filter(|(_, (line, _))| !is_passthrough_line(line))
        .map(|(i, (line, _))| match line.split_once('\t') {
            Some((s, t)) if !t.contains('\t') => Ok((s.trim().to_string(), t.trim().to_string())),
            _ => Err(Error::Parse {
                line: i + 1,
                msg: "expected exactly one tab between source and target".into(),
            }),
        })
        .collect()
}

/// Reads pairs from either format. A file whose first entry line contains
/// the phrase-table delimiter is read as a phrase table.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_table = text
        .lines()
        .find(|l| !is_passthrough_line(l))
        .is_some_and(|l| l.contains(DELIMITER));
    if is_table {
        Ok(parse_phrase_table_str(&text)?
            .into_iter()
            .map(|e| (e.src_text, e.tgt_text, e.features))
            .collect())
    } else {
        Ok(parse_bitext_str(&text)?
            .into_iter()
            .map(|(s, t)| (s, t, Vec::new()))
            .collect())
    }
}

/// Keeps the first occurrence of each `(src_text, tgt_text)` pair, in
/// input order. Frequencies are discarded.
pub fn dedup_pairs<I>(entries: I) -> Vec<PhrasePair>
where
    I: IntoIterator<Item = PhrasePair>,
{
    let mut seen: HashSet<(String, String)> = HashSet::new();
    entries
        .into_iter()
        .filter(|p| seen.insert((p.src_text.clone(), p.tgt_text.clone())))
        .collect()
}

/// `batch_size` uniform draws with replacement.
pub fn sample_batch<'a>(
    pairs: &'a [PhrasePair],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<&'a PhrasePair>> {
    if pairs.is_empty() {
        return Err(Error::Input("cannot sample from an empty pool".into()));
    }
    Ok((0..batch_size).map(|_| &pairs[rng.below(pairs.len())]).collect())
}
