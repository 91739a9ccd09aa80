use crate::error::{bail, Result};

pub const UNK_SYMBOL: &str = "<unk>";
pub const EOS_SYMBOL: &str = "<eos>";
pub const BLANK_SYMBOL: &str = "<blank>";

/// Token inventory.
///
/// Ids: normal tokens `0..U`, then `<unk>`, then the shared `<sos>/<eos>`,
/// then `<blank>`. The decoder softmax covers `0..=eos` (no blank); the CTC
/// posterior covers the normal tokens plus blank (no eos).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.is_empty() {
            bail!(Config, "vocabulary needs at least one normal token");
        }
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) || s.starts_with('<') || s.parse::<usize>().is_ok() {
                bail!(Config, "invalid token symbol {:?}", s);
            }
            if symbols[..i].contains(s) {
                bail!(Config, "duplicate token symbol {:?}", s);
            }
        }
        Ok(Self { symbols })
    }

    /// `count` tokens named `a`, `b`, …, `z`, `aa`, `ab`, ….
    pub fn letters(count: usize) -> Self {
        let name = |mut i: usize| {
            let mut s = Vec::new();
            loop {
                s.push(b'a' + (i % 26) as u8);
                if i < 26 {
                    break;
                }
                i = i / 26 - 1;
            }
            s.reverse();
            String::from_utf8(s).unwrap()
        };
        Self { symbols: (0..count).map(name).collect() }
    }

    /// Number of normal tokens `U`.
    pub fn num_normal(&self) -> usize {
        self.symbols.len()
    }

    pub fn unk(&self) -> usize {
        self.symbols.len()
    }

    pub fn eos(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn sos(&self) -> usize {
        self.eos()
    }

    pub fn blank(&self) -> usize {
        self.symbols.len() + 2
    }

    /// Output size of the decoder softmax (normal tokens, unk, eos).
    pub fn decoder_size(&self) -> usize {
        self.symbols.len() + 2
    }

    /// Width of the CTC posterior (normal tokens, blank).
    pub fn ctc_size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn is_normal(&self, id: usize) -> bool {
        id < self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: usize) -> &str {
        match id {
            i if i < self.symbols.len() => &self.symbols[i],
            i if i == self.unk() => UNK_SYMBOL,
            i if i == self.eos() => EOS_SYMBOL,
            i if i == self.blank() => BLANK_SYMBOL,
            _ => "<invalid>",
        }
    }

    /// Parses one whitespace-separated token: a symbol or a numeric id of a normal token.
    pub fn parse_token(&self, text: &str) -> Result<usize> {
        if let Some(i) = self.symbols.iter().position(|s| s == text) {
            return Ok(i);
        }
        match text.parse::<usize>() {
            Ok(i) if self.is_normal(i) => Ok(i),
            Ok(i) => bail!(Invalid, "token id {} is not a normal token (vocabulary has {})", i, self.num_normal()),
            Err(_) if text == UNK_SYMBOL => Ok(self.unk()),
            Err(_) => bail!(Invalid, "unknown token {:?}", text),
        }
    }

    pub fn parse_line(&self, line: &str) -> Result<Vec<usize>> {
        line.split_whitespace().map(|t| self.parse_token(t)).collect()
    }

    pub fn format(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.symbol(t)).collect::<Vec<_>>().join(" ")
    }
}
