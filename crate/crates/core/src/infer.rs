//! Using a trained model: pair scoring, ancestral sampling, phrase-table
//! rescoring, the unknown-word count feature, and vector export.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::{
    is_passthrough_line, split_lines_keep_ends, PhrasePair, PhraseTableEntry, TokenId, Vocabulary,
    EOS,
};
use crate::error::{Error, Result};
use crate::model::{encode, log_prob, DecoderSession, ModelParams};
use crate::rng::Rng;

/// `log p(tgt | src)` under `p`.
pub fn score_pair(p: &ModelParams, pair: &PhrasePair) -> Result<f64> {
    log_prob(&pair.src_ids, &pair.tgt_ids, p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    /// Emitted ids, always EOS-terminated.
    pub tgt_ids: Vec<TokenId>,
    /// Log-probability of the emitted tokens. For a truncated sample the
    /// appended EOS is not scored.
    pub score: f64,
    /// The sample hit `max_len` without producing EOS.
    pub truncated: bool,
    /// How many draws produced this sequence (1 for a single sample).
    pub count: usize,
}

impl ScoredSample {
    pub fn text(&self, v: &Vocabulary) -> String {
        v.decode(&self.tgt_ids)
    }
}

pub const DEFAULT_MAX_LEN: usize = 50;

/// Draws one target sequence from a prepared decoder.
pub fn sample_from(session: &DecoderSession<'_>, max_len: usize, rng: &mut Rng) -> Result<ScoredSample> {
    if max_len == 0 {
        return Err(Error::Parameter("max_len must be at least 1".into()));
    }
    let mut s = session.clone();
    let mut ids = Vec::new();
    let mut score = 0.0;
    for _ in 0..max_len {
        let probs = s.step()?;
        let y = rng.categorical(&probs);
        score += probs[y].ln();
        ids.push(y);
        if y == EOS {
            return Ok(ScoredSample {
                tgt_ids: ids,
                score,
                truncated: false,
                count: 1,
            });
        }
        s.feed(y);
    }
    ids.push(EOS);
    Ok(ScoredSample {
        tgt_ids: ids,
        score,
        truncated: true,
        count: 1,
    })
}

/// Ancestral sample of a target for `src_ids`, stopping at EOS or after
/// `max_len` tokens.
pub fn sample(p: &ModelParams, src_ids: &[TokenId], max_len: usize, rng: &mut Rng) -> Result<ScoredSample> {
    let session = DecoderSession::new(src_ids, p)?;
    sample_from(&session, max_len, rng)
}

/// Draws `n` samples, merges duplicates, and returns the `k` best by score
/// (ties keep draw order).
pub fn top_samples(
    p: &ModelParams,
    src_ids: &[TokenId],
    n: usize,
    k: usize,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<ScoredSample>> {
    if k == 0 || n < k {
        return Err(Error::Parameter(format!("need n >= k >= 1, got n={n} k={k}")));
    }
    let session = DecoderSession::new(src_ids, p)?;
    let mut unique: Vec<ScoredSample> = Vec::new();
    let mut seen: HashMap<Vec<TokenId>, usize> = HashMap::new();
    for _ in 0..n {
        let s = sample_from(&session, max_len, rng)?;
        match seen.get(&s.tgt_ids) {
            Some(&i) => unique[i].count += 1,
            None => {
                seen.insert(s.tgt_ids.clone(), unique.len());
                unique.push(s);
            }
        }
    }
    unique.sort_by(|a, b| b.score.total_cmp(&a.score));
    unique.truncate(k);
    Ok(unique)
}

/// Which sides `unk_penalty` counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnkSide {
    Both,
    Source,
    Target,
}

impl std::str::FromStr for UnkSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "src" | "source" => Ok(Self::Source),
            "tgt" | "target" => Ok(Self::Target),
            other => Err(Error::Parameter(format!("unknown side {other:?}"))),
        }
    }
}

/// Number of tokens outside the shortlists.
pub fn unk_penalty(pair: &PhrasePair, v_src: &Vocabulary, v_tgt: &Vocabulary, side: UnkSide) -> usize {
    let count = |text: &str, v: &Vocabulary| text.split_whitespace().filter(|t| !v.contains(t)).count();
    let src = count(&pair.src_text, v_src);
    let tgt = count(&pair.tgt_text, v_tgt);
    match side {
        UnkSide::Both => src + tgt,
        UnkSide::Source => src,
        UnkSide::Target => tgt,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RescoreSummary {
    /// Lines read, comments and blank lines included.
    pub lines: usize,
    /// Lines that received a score.
    pub scored: usize,
}

#[derive(Clone, Debug, Default)]
pub struct RescoreOptions {
    /// Emit a leading `#` comment describing the appended feature.
    pub header: bool,
    /// Also append the unknown-word count as a second feature.
    pub unk_feature: Option<UnkSide>,
}

pub fn format_score(score: f64) -> String {
    format!("{score:.6}")
}

/// Rescores phrase-table text, appending the model log-probability to each
/// entry's feature field. Comment and blank lines pass through unchanged.
pub fn rescore_str(
    p: &ModelParams,
    v_src: &Vocabulary,
    v_tgt: &Vocabulary,
    text: &str,
    opts: &RescoreOptions,
) -> Result<(String, RescoreSummary)> {
    let mut out = String::with_capacity(text.len() + text.len() / 4);
    let mut summary = RescoreSummary::default();
    if opts.header {
        out.push_str("# appended feature: natural-log probability of target given source");
        if opts.unk_feature.is_some() {
            out.push_str(", then unknown-word count");
        }
        out.push('\n');
    }
    for (i, (line, end)) in split_lines_keep_ends(text).into_iter().enumerate() {
        summary.lines += 1;
        if is_passthrough_line(line) {
            out.push_str(line);
            out.push_str(end);
            continue;
        }
        let entry = PhraseTableEntry::parse(line, i + 1)?;
        let pair = entry.to_pair(v_src, v_tgt);
        let score = score_pair(p, &pair).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let mut value = format_score(score);
        if let Some(side) = opts.unk_feature {
            value.push(' ');
            value.push_str(&unk_penalty(&pair, v_src, v_tgt, side).to_string());
        }
        out.push_str(&entry.with_appended_feature(&value));
        out.push_str(end);
        summary.scored += 1;
    }
    Ok((out, summary))
}

/// File-to-file [`rescore_str`]. On failure no output file is left behind.
pub fn rescore_table(
    p: &ModelParams,
    v_src: &Vocabulary,
    v_tgt: &Vocabulary,
    in_path: &Path,
    out_path: &Path,
    opts: &RescoreOptions,
) -> Result<RescoreSummary> {
    let text = fs::read_to_string(in_path).map_err(|e| Error::io(in_path, e))?;
    let (out, summary) = rescore_str(p, v_src, v_tgt, &text, opts)?;
    write_atomic(out_path, out.as_bytes())?;
    Ok(summary)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let res = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn format_vector(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.8e}")).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "src" | "source" => Ok(Self::Source),
            "tgt" | "target" => Ok(Self::Target),
            other => Err(Error::Parameter(format!("unknown side {other:?}"))),
        }
    }
}

/// `token<TAB>v_1 ... v_d` for every vocabulary entry, reserved tokens
/// first.
pub fn write_word_embeddings<W: Write + ?Sized>(p: &ModelParams, v: &Vocabulary, side: Side, out: &mut W) -> Result<()> {
    let table = match side {
        Side::Source => &p.src_embed,
        Side::Target => &p.tgt_embed,
    };
    if table.rows() != v.len() {
        return Err(Error::Input(format!(
            "vocabulary has {} entries but the embedding table has {} rows",
            v.len(),
            table.rows()
        )));
    }
    for (id, tok) in v.tokens().iter().enumerate() {
        writeln!(out, "{tok}\t{}", format_vector(table.row(id))).map_err(|e| Error::io("<embeddings>", e))?;
    }
    Ok(())
}

pub fn export_word_embeddings(p: &ModelParams, v: &Vocabulary, side: Side, out_path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_word_embeddings(p, v, side, &mut buf)?;
    write_atomic(out_path, &buf)
}

/// `phrase<TAB>c_1 ... c_n` with `c` the encoder summary of each phrase.
pub fn write_phrase_vectors<S: AsRef<str>, W: Write + ?Sized>(
    p: &ModelParams,
    phrases: &[S],
    v_src: &Vocabulary,
    out: &mut W,
) -> Result<()> {
    for phrase in phrases {
        let phrase = phrase.as_ref();
        let ids = crate::data::encode_phrase(phrase, v_src);
        let c = encode(&ids, p)?.context;
        writeln!(out, "{phrase}\t{}", format_vector(&c)).map_err(|e| Error::io("<phrases>", e))?;
    }
    Ok(())
}

pub fn export_phrase_vectors<S: AsRef<str>>(
    p: &ModelParams,
    phrases: &[S],
    v_src: &Vocabulary,
    out_path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    write_phrase_vectors(p, phrases, v_src, &mut buf)?;
    write_atomic(out_path, &buf)
}
