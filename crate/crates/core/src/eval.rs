//! Levenshtein alignment and corpus error rates.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub distance: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

/// Unit-cost edit distance. When several alignments are optimal the
/// backtrace prefers substitution, then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut ops = EditOps {
        distance: d[n * w + m],
        ..EditOps::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.deletions += 1;
            i -= 1;
        } else {
            ops.insertions += 1;
            j -= 1;
        }
    }
    ops
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Char,
    Word,
}

impl std::str::FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Unit::Char),
            "word" => Ok(Unit::Word),
            _ => Err(Error::arg(format!("unknown scoring unit {s:?} (char or word)"))),
        }
    }
}

/// Characters (spaces included) or space-separated words.
pub fn tokenize(text: &str, unit: Unit) -> Vec<&str> {
    let text = text.trim();
    match unit {
        Unit::Char => text.char_indices().map(|(i, c)| &text[i..i + c.len_utf8()]).collect(),
        Unit::Word => text.split(' ').filter(|w| !w.is_empty()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttScore {
    pub id: String,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_length: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `Σ(S+D+I) / Σ ref length`; 0 for an empty reference with no errors.
    pub fn rate(&self) -> f64 {
        if self.ref_length == 0 {
            if self.errors() == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.errors() as f64 / self.ref_length as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub cer: f64,
    pub wer: f64,
    /// Unit of the per-utterance counts.
    pub unit: Unit,
    pub chars: ErrorCounts,
    pub words: ErrorCounts,
    /// Reference ids without a hypothesis, scored as all deletions.
    pub missing: Vec<String>,
    pub utterances: Vec<UttScore>,
}

impl ScoreReport {
    pub fn error_rate(&self) -> f64 {
        match self.unit {
            Unit::Char => self.cer,
            Unit::Word => self.wer,
        }
    }
}

fn index(entries: &[(String, String)], what: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (id, text) in entries {
        if map.insert(id.clone(), text.clone()).is_some() {
            return Err(Error::arg(format!("duplicate {what} id {id:?}")));
        }
    }
    Ok(map)
}

/// Character and word alignment of one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub chars: EditOps,
    pub char_len: usize,
    pub words: EditOps,
    pub word_len: usize,
}

pub fn align(reference: &str, hypothesis: &str) -> Alignment {
    let (rc, rw) = (tokenize(reference, Unit::Char), tokenize(reference, Unit::Word));
    Alignment {
        chars: edit_distance(&rc, &tokenize(hypothesis, Unit::Char)),
        char_len: rc.len(),
        words: edit_distance(&rw, &tokenize(hypothesis, Unit::Word)),
        word_len: rw.len(),
    }
}

/// Scores `(id, text)` hypotheses against references, in reference order.
pub fn score_corpus(refs: &[(String, String)], hyps: &[(String, String)], unit: Unit) -> Result<ScoreReport> {
    score_corpus_with(refs, hyps, unit, |pairs| pairs.iter().map(|(r, h)| align(r, h)).collect())
}

/// Like [`score_corpus`], with the `(reference, hypothesis)` alignments
/// computed by `align_all`, which must return one [`Alignment`] per pair in
/// order (e.g. on a worker pool).
pub fn score_corpus_with<F>(refs: &[(String, String)], hyps: &[(String, String)], unit: Unit, align_all: F) -> Result<ScoreReport>
where
    F: FnOnce(&[(&str, &str)]) -> Vec<Alignment>,
{
    let ref_map = index(refs, "reference")?;
    let hyp_map = index(hyps, "hypothesis")?;
    let unknown: Vec<&String> = hyp_map.keys().filter(|k| !ref_map.contains_key(*k)).collect();
    if !unknown.is_empty() {
        return Err(Error::arg(format!("hypotheses for unknown utterances: {unknown:?}")));
    }
    let mut missing = Vec::new();
    let pairs: Vec<(&str, &str)> = refs
        .iter()
        .map(|(id, r)| match hyp_map.get(id) {
            Some(h) => (r.as_str(), h.as_str()),
            None => {
                missing.push(id.clone());
                (r.as_str(), "")
            }
        })
        .collect();
    let aligned = align_all(&pairs);
    if aligned.len() != pairs.len() {
        return Err(Error::State(format!("{} alignments for {} utterances", aligned.len(), pairs.len())));
    }
    let mut chars = ErrorCounts { substitutions: 0, deletions: 0, insertions: 0, ref_length: 0 };
    let mut words = chars.clone();
    let mut utterances = Vec::with_capacity(refs.len());
    for ((id, _), a) in refs.iter().zip(&aligned) {
        for (acc, ops, len) in [(&mut chars, a.chars, a.char_len), (&mut words, a.words, a.word_len)] {
            acc.substitutions += ops.substitutions;
            acc.deletions += ops.deletions;
            acc.insertions += ops.insertions;
            acc.ref_length += len;
        }
        let (ops, len) = match unit {
            Unit::Char => (a.chars, a.char_len),
            Unit::Word => (a.words, a.word_len),
        };
        utterances.push(UttScore {
            id: id.clone(),
            substitutions: ops.substitutions,
            deletions: ops.deletions,
            insertions: ops.insertions,
            ref_length: len,
        });
    }
    Ok(ScoreReport {
        cer: chars.rate(),
        wer: words.rate(),
        unit,
        chars,
        words,
        missing,
        utterances,
    })
}

/// Parses `utt_id<TAB>text` lines; a line without a tab is an empty text.
pub fn parse_text_file(contents: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut offset = 0u64;
    for line in contents.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let (id, text) = body.split_once('\t').unwrap_or((body, ""));
            if id.is_empty() {
                return Err(Error::format(offset, "line has an empty utterance id"));
            }
            if !seen.insert(id.to_string()) {
                return Err(Error::format(offset, format!("duplicate utterance id {id:?}")));
            }
            out.push((id.to_string(), text.to_string()));
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

pub fn read_text_file(path: &Path) -> Result<Vec<(String, String)>> {
    parse_text_file(&std::fs::read_to_string(path)?)
}

pub fn format_text_file(entries: &[(String, String)]) -> String {
    entries.iter().map(|(id, t)| format!("{id}\t{t}\n")).collect()
}
