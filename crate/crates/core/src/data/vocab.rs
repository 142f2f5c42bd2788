use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const SOS_EOS: usize = 1;
pub const UNK: usize = 2;

pub const BLANK_TOKEN: &str = "<blank>";
pub const SOS_EOS_TOKEN: &str = "<sos/eos>";
pub const UNK_TOKEN: &str = "<unk>";
/// Vocabulary entry for the space character between words.
pub const SPACE_TOKEN: &str = "<space>";

/// Ordered token inventory; the position of a token is its id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return Err(Error::arg(format!(
                "vocabulary needs the three reserved tokens and at least one letter, got {} tokens",
                tokens.len()
            )));
        }
        for (id, want) in [(BLANK, BLANK_TOKEN), (SOS_EOS, SOS_EOS_TOKEN), (UNK, UNK_TOKEN)] {
            if tokens[id] != want {
                return Err(Error::arg(format!(
                    "vocabulary entry {id} must be {want:?}, found {:?}",
                    tokens[id]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::arg(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Reserved tokens followed by `letters` in the given order.
    pub fn from_letters<S: AsRef<str>>(letters: &[S]) -> Result<Self> {
        let mut tokens = vec![BLANK_TOKEN.to_string(), SOS_EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(letters.iter().map(|s| s.as_ref().to_string()));
        Vocabulary::new(tokens)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Vocabulary::new(text.lines().map(str::to_string).collect())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Vocabulary::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Per-character tokenization; a space maps to [`SPACE_TOKEN`] and
    /// unknown characters to the unk id.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        let mut buf = [0u8; 4];
        text.chars()
            .map(|c| {
                let tok = if c == ' ' { SPACE_TOKEN } else { c.encode_utf8(&mut buf) };
                self.id(tok).unwrap_or(UNK)
            })
            .collect()
    }

    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| match self.token(id) {
                Some(SPACE_TOKEN) => " ",
                Some(t) => t,
                None => UNK_TOKEN,
            })
            .collect()
    }
}

/// Target letter sequence: non-empty, free of the blank and sos/eos ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::arg("label sequence is empty"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i == BLANK || i == SOS_EOS) {
            return Err(Error::arg(format!("label sequence contains reserved id {bad}")));
        }
        Ok(LabelSequence(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&i| i >= vocab_size) {
            Some(bad) => Err(Error::arg(format!(
                "label id {bad} outside vocabulary of size {vocab_size}"
            ))),
            None => Ok(()),
        }
    }
}
