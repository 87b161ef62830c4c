use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<mask>"];

/// Token table: the four reserved entries, then one `<lang:XX>` tag per
/// language, then content tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    languages: Vec<String>,
}

pub fn lang_token(code: &str) -> String {
    format!("<lang:{code}>")
}

impl Vocab {
    pub fn new<S: AsRef<str>>(languages: &[S], content: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(languages.iter().map(|l| lang_token(l.as_ref())));
        tokens.extend(content.iter().map(|c| c.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Config(format!("vocabulary entry {i} must be {r}")));
            }
        }
        let mut languages = Vec::new();
        for t in &tokens[RESERVED.len()..] {
            match t.strip_prefix("<lang:").and_then(|s| s.strip_suffix('>')) {
                Some(code) => languages.push(code.to_string()),
                None => break,
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("vocabulary entry {i} {t:?} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index, languages })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn lang_id(&self, code: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == code)
            .map(|i| RESERVED.len() + i)
            .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    /// Language code of a tag id.
    pub fn lang_of(&self, id: usize) -> Option<&str> {
        id.checked_sub(RESERVED.len()).and_then(|i| self.languages.get(i)).map(String::as_str)
    }

    /// First content id.
    pub fn content_start(&self) -> usize {
        RESERVED.len() + self.languages.len()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.content_start()
    }

    /// Whitespace-separated content tokens to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| match self.id(w) {
                Some(i) if !self.is_special(i) => Ok(i),
                _ => Err(Error::Usage(format!("token {w:?} is not a content token of the vocabulary"))),
            })
            .collect()
    }

    /// Content tokens up to the first `</s>`, space-joined.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| !self.is_special(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_lookup() {
        let v = Vocab::new(&["de", "ja"], &["t00", "t01", "."]).unwrap();
        assert_eq!(v.len(), 9);
        assert_eq!(v.lang_id("ja").unwrap(), 5);
        assert_eq!(v.lang_of(4), Some("de"));
        assert_eq!(v.content_start(), 6);
        assert!(matches!(v.lang_id("fr"), Err(Error::UnknownLanguage(_))));
        assert_eq!(v.encode("t01 t00 .").unwrap(), vec![7, 6, 8]);
        assert_eq!(v.decode(&[7, 3, 6, EOS, 8]), "t01 t00");
        assert!(v.encode("<mask>").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::new(&["de"], &["a", "b"]).unwrap();
        v.write(&path).unwrap();
        assert_eq!(Vocab::read(&path).unwrap(), v);
        fs::write(&path, "<s>\n<pad>\n</s>\n<mask>\n").unwrap();
        assert!(Vocab::read(&path).is_err());
    }
}
