use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";
pub const LBRACKET: &str = "(";
pub const RBRACKET: &str = ")";

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const LBRACKET_ID: u32 = 3;
pub const RBRACKET_ID: u32 = 4;

pub const SPECIALS: [&str; 5] = [PAD, MASK, UNK, LBRACKET, RBRACKET];

/// Subword inventory. Specials occupy the lowest indices in a fixed order;
/// the remaining entries are matched greedily longest-first within each
/// whitespace-delimited word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from the non-special pieces, in order. Duplicates
    /// and pieces containing whitespace are rejected.
    pub fn new<I, S>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(pieces.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Format(format!(
                    "vocabulary index {i} must hold `{special}`"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary entry {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        let max_piece_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Self {
            tokens,
            index,
            max_piece_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match tokenisation. Specials are recognised as whole
    /// words; characters no piece covers become `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(id) = self.id(word) {
                out.push(id);
                continue;
            }
            let chars: Vec<(usize, char)> = word.char_indices().collect();
            let mut start = 0;
            while start < chars.len() {
                let mut matched = None;
                let longest = self.max_piece_chars.min(chars.len() - start);
                for len in (1..=longest).rev() {
                    let from = chars[start].0;
                    let to = chars.get(start + len).map_or(word.len(), |c| c.0);
                    if let Some(id) = self.index.get(&word[from..to]) {
                        if *id >= LBRACKET_ID || len == chars.len() {
                            matched = Some((*id, len));
                            break;
                        }
                    }
                }
                match matched {
                    Some((id, len)) => {
                        out.push(id);
                        start += len;
                    }
                    None => {
                        out.push(UNK_ID);
                        start += 1;
                    }
                }
            }
        }
        out
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            match self.token(id) {
                Some(t) => s.push_str(t),
                None => {
                    let _ = write!(s, "<{id}>");
                }
            }
        }
        s
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["lives", "in", "paris", "ent_", "042", "04", "2", "."]).unwrap()
    }

    #[test]
    fn specials_have_fixed_low_indices() {
        let v = vocab();
        assert_eq!(v.id(PAD), Some(PAD_ID));
        assert_eq!(v.id(MASK), Some(MASK_ID));
        assert_eq!(v.id(UNK), Some(UNK_ID));
        assert_eq!(v.id("("), Some(LBRACKET_ID));
        assert_eq!(v.id(")"), Some(RBRACKET_ID));
    }

    #[test]
    fn whole_words_and_greedy_pieces() {
        let v = vocab();
        assert_eq!(v.tokenize("paris"), vec![v.id("paris").unwrap()]);
        // longest match prefers "042" over "04" + "2"
        assert_eq!(
            v.tokenize("ent_042"),
            vec![v.id("ent_").unwrap(), v.id("042").unwrap()]
        );
        assert_eq!(
            v.tokenize("[MASK] lives in ( paris )"),
            vec![MASK_ID, 5, 6, LBRACKET_ID, 7, RBRACKET_ID]
        );
    }

    #[test]
    fn unknown_symbols_and_empty_input() {
        let v = vocab();
        assert_eq!(v.tokenize("☂"), vec![UNK_ID]);
        assert_eq!(v.tokenize("paris☂"), vec![v.id("paris").unwrap(), UNK_ID]);
        assert!(v.tokenize("").is_empty());
        assert!(v.tokenize("   ").is_empty());
    }

    #[test]
    fn text_round_trip_and_rejections() {
        let v = vocab();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::new(["a", "a"]).is_err());
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }
}
