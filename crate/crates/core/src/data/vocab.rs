use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_RESERVED: usize = 5;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Whitespace-token vocabulary with five reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved ids followed by `tokens` in the given order (duplicates rejected).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary entry {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Frequency-ranked tokens (ties broken lexicographically), capped so the
    /// vocabulary including reserved ids has at most `max_size` entries.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < NUM_RESERVED {
            return Err(Error::Data(format!("max_size {max_size} leaves no room for reserved ids")));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                if !RESERVED_TOKENS.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_RESERVED);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// `[CLS] line [SEP]`.
    pub fn encode_sequence(&self, line: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(line.len() / 2 + 2);
        ids.push(CLS);
        ids.extend(self.encode(line));
        ids.push(SEP);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let toks = ids
            .iter()
            .map(|&i| self.token(i).ok_or(Error::TokenOutOfRange { id: i, vocab: self.len() }))
            .collect::<Result<Vec<_>>>()?;
        Ok(toks.join(" "))
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_RESERVED || lines[..NUM_RESERVED] != RESERVED_TOKENS {
            return Err(Error::Data("vocabulary file must start with the reserved tokens".into()));
        }
        Self::from_tokens(lines[NUM_RESERVED..].iter().copied())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let v = Vocab::build(["a a b"], 8).unwrap();
        assert_eq!(v.id("a"), NUM_RESERVED);
        assert_eq!(v.id("b"), NUM_RESERVED + 1);
        assert_eq!(v.id("zzz"), UNK);
        let tie = Vocab::build(["c b a c b a d"], 7).unwrap();
        assert_eq!(tie.tokens()[NUM_RESERVED..], ["a", "b"]);
    }

    #[test]
    fn deterministic_bytes() {
        let corpus = ["x y z y", "z z q"];
        assert_eq!(Vocab::build(corpus, 20).unwrap().to_text(), Vocab::build(corpus, 20).unwrap().to_text());
    }

    #[test]
    fn encode_decode_roundtrip() {
        let v = Vocab::build(["the cat sat on the mat"], 32).unwrap();
        let ids = v.encode("the mat sat");
        assert_eq!(v.decode(&ids).unwrap(), "the mat sat");
        assert_eq!(v.encode_sequence("cat")[..], [CLS, v.id("cat"), SEP]);
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(v.decode(&[999]).is_err());
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocab::from_tokens(["a", "a"]).is_err());
        assert!(Vocab::from_tokens(["[MASK]"]).is_err());
    }
}
