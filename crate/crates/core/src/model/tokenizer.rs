//! Tokenizers map token ids to text. The model only needs the special ids.

use std::path::Path;

use serde::Deserialize;

use super::ModelError;

/// 256 byte tokens plus SOT, EOT and PAD.
pub const BYTE_VOCAB: usize = 259;

pub trait Tokenizer: Send + Sync {
    /// Prompt fed to the decoder before the first predicted token.
    fn sot_sequence(&self) -> Vec<u32>;
    fn eot(&self) -> u32;
    fn decode(&self, ids: &[u32]) -> String;
}

/// Byte-level tokenizer. Specials occupy the top three ids of the
/// vocabulary: SOT = n−3, EOT = n−2, PAD = n−1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteTokenizer {
    n_vocab: usize,
}

impl ByteTokenizer {
    pub fn new(n_vocab: usize) -> Self {
        assert!(n_vocab >= 3, "vocabulary too small for special tokens");
        Self { n_vocab }
    }

    pub fn sot(&self) -> u32 {
        (self.n_vocab - 3) as u32
    }

    pub fn pad(&self) -> u32 {
        (self.n_vocab - 1) as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let limit = self.byte_limit();
        text.bytes()
            .map(u32::from)
            .filter(|&b| (b as usize) < limit)
            .collect()
    }

    fn byte_limit(&self) -> usize {
        (self.n_vocab - 3).min(256)
    }
}

impl Tokenizer for ByteTokenizer {
    fn sot_sequence(&self) -> Vec<u32> {
        vec![self.sot()]
    }

    fn eot(&self) -> u32 {
        (self.n_vocab - 2) as u32
    }

    fn decode(&self, ids: &[u32]) -> String {
        let limit = self.byte_limit();
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| (id as usize) < limit)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Token-list vocabulary loaded from JSON:
/// `{"tokens": [...], "sot_sequence": [...], "eot": n}`.
///
/// Decoding concatenates token strings and skips special ids.
#[derive(Debug, Clone, Deserialize)]
pub struct VocabTokenizer {
    tokens: Vec<String>,
    sot_sequence: Vec<u32>,
    eot: u32,
}

impl VocabTokenizer {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let tok: VocabTokenizer =
            serde_json::from_str(&text).map_err(|e| ModelError::Tokenizer(e.to_string()))?;
        if tok.sot_sequence.is_empty() {
            return Err(ModelError::Tokenizer("empty sot_sequence".into()));
        }
        Ok(tok)
    }

    pub fn n_vocab(&self) -> usize {
        self.tokens.len()
    }
}

impl Tokenizer for VocabTokenizer {
    fn sot_sequence(&self) -> Vec<u32> {
        self.sot_sequence.clone()
    }

    fn eot(&self) -> u32 {
        self.eot
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != self.eot && !self.sot_sequence.contains(&id))
            .filter_map(|&id| self.tokens.get(id as usize))
            .map(String::as_str)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip_and_specials() {
        let t = ByteTokenizer::new(BYTE_VOCAB);
        assert_eq!((t.sot(), t.eot(), t.pad()), (256, 257, 258));
        let ids = t.encode("hi there");
        let mut with_eot = ids.clone();
        with_eot.push(t.eot());
        assert_eq!(t.decode(&with_eot), "hi there");
    }

    #[test]
    fn vocab_tokenizer_skips_specials() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        std::fs::write(&p, r#"{"tokens":["a","b"," c","<eot>","<sot>"],"sot_sequence":[4],"eot":3}"#).unwrap();
        let t = VocabTokenizer::from_json_file(&p).unwrap();
        assert_eq!(t.decode(&[4, 0, 2, 1, 3]), "a cb");
        assert_eq!(t.n_vocab(), 5);
    }
}
