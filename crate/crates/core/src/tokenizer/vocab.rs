use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIAL: u32 = SPECIAL_TOKENS.len() as u32;

/// Prefix of word-internal subword pieces.
pub const CONTINUATION: &str = "##";

/// Bijective token ↔ id table with the five reserved tokens at ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn with_specials() -> Self {
        let mut v = Self {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for s in SPECIAL_TOKENS {
            v.push(s).expect("specials are distinct");
        }
        v
    }

    /// Builds from a token list whose first five entries are the reserved
    /// tokens in order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(Error::input(format!(
                "vocabulary needs at least {} tokens, got {}",
                SPECIAL_TOKENS.len(),
                tokens.len()
            )));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::input(format!("id {i} must be {s}, found {:?}", tokens[i])));
            }
        }
        let mut v = Self {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for t in tokens {
            v.push(&t)?;
        }
        Ok(v)
    }

    pub(crate) fn push(&mut self, token: &str) -> Result<u32> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::input(format!("invalid token {token:?}")));
        }
        if self.token_to_id.contains_key(token) {
            return Err(Error::input(format!("duplicate token {token:?}")));
        }
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.to_owned(), id);
        self.id_to_token.push(token.to_owned());
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    /// Number of ids a RANDOM corruption may draw from.
    pub fn num_regular(&self) -> usize {
        self.len() - NUM_SPECIAL as usize
    }

    /// Serializes as one token per line (line index = id) after `# `
    /// comment lines.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        out.push_str("# minibert vocabulary\n");
        let _ = writeln!(out, "# size {}", self.len());
        out.push_str("# one token per line; line index after this header = id\n");
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    /// Parses the vocabulary file format. Header comments are the leading
    /// lines starting with `"# "`; tokens never contain whitespace, so no
    /// token line can be mistaken for one.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut in_header = true;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if in_header && line.starts_with("# ") {
                continue;
            }
            in_header = false;
            if line.is_empty() {
                return Err(Error::parse(i + 1, "empty token line"));
            }
            if line.chars().any(char::is_whitespace) {
                return Err(Error::parse(i + 1, format!("token {line:?} contains whitespace")));
            }
            tokens.push(line.to_owned());
        }
        Self::from_tokens(tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }
}
