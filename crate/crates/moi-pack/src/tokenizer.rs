//! Token encoders: the built-in byte tokenizer and a vocab-file tokenizer.
//!
//! Both expose the same small interface: encode text to ids and name the
//! four special ids (turn markers, newline, padding). The byte tokenizer is
//! the default and needs no external data: ids 0–255 are raw UTF-8 bytes,
//! followed by the specials. A vocab tokenizer is loaded from a JSON file
//! and encodes by greedy longest match, so arbitrary subword vocabularies
//! can be plugged in without touching the pipeline.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Anything that can turn text into token ids for the packing pipeline.
///
/// Implementations guarantee the four special ids are pairwise distinct and
/// that `encode` never emits the pad id for real text.
pub trait Tokenizer: Send + Sync {
    /// Encode plain text (no chat markup) to ids.
    fn encode(&self, text: &str) -> Result<Vec<u32>>;
    /// Decode ids back to text. Turn markers decode to their literal
    /// `<|im_start|>` / `<|im_end|>` spellings; pad decodes to nothing.
    fn decode(&self, ids: &[u32]) -> Result<String>;
    /// Id emitted for the `<|im_start|>` turn marker.
    fn im_start_id(&self) -> u32;
    /// Id emitted for the `<|im_end|>` turn marker.
    fn im_end_id(&self) -> u32;
    /// Id reserved for a newline token. The byte tokenizer never emits it
    /// (newlines are byte 10 there); vocab tokenizers use their own entry.
    fn newline_id(&self) -> u32;
    /// Id used to fill the padded tail of every pack.
    fn pad_id(&self) -> u32;
    /// One past the largest id this tokenizer can produce.
    fn vocab_size(&self) -> usize;
}

pub const IM_START_TEXT: &str = "<|im_start|>";
pub const IM_END_TEXT: &str = "<|im_end|>";

/// Built-in tokenizer: UTF-8 bytes are their own ids, specials follow.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const IM_START: u32 = 256;
    pub const IM_END: u32 = 257;
    /// Reserved alias; byte-mode newlines are encoded as byte 10 instead.
    pub const NEWLINE: u32 = 258;
    pub const PAD: u32 = 259;
    pub const VOCAB_SIZE: usize = 260;
}

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(text.bytes().map(u32::from).collect())
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => bytes.push(id as u8),
                Self::IM_START => bytes.extend_from_slice(IM_START_TEXT.as_bytes()),
                Self::IM_END => bytes.extend_from_slice(IM_END_TEXT.as_bytes()),
                Self::NEWLINE => bytes.push(b'\n'),
                Self::PAD => {}
                other => {
                    return Err(Error::Tokenize {
                        msg: format!("id {other} is outside the byte tokenizer vocabulary"),
                    })
                }
            }
        }
        String::from_utf8(bytes).map_err(|e| Error::Tokenize {
            msg: format!("decoded bytes are not valid UTF-8: {e}"),
        })
    }

    fn im_start_id(&self) -> u32 {
        Self::IM_START
    }
    fn im_end_id(&self) -> u32 {
        Self::IM_END
    }
    fn newline_id(&self) -> u32 {
        Self::NEWLINE
    }
    fn pad_id(&self) -> u32 {
        Self::PAD
    }
    fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }
}

#[derive(Deserialize)]
struct VocabFile {
    tokens: HashMap<String, u32>,
    special: SpecialIds,
}

#[derive(Deserialize)]
struct SpecialIds {
    im_start: u32,
    im_end: u32,
    pad: u32,
}

/// Tokenizer backed by an explicit string→id table, encoding by greedy
/// longest match. Loaded from JSON:
/// `{"tokens": {"the": 3, ...}, "special": {"im_start": 0, "im_end": 1, "pad": 2}}`.
/// The table must contain an entry for `"\n"`, which doubles as the newline
/// special.
#[derive(Debug, Clone)]
pub struct VocabTokenizer {
    map: HashMap<String, u32>,
    by_id: HashMap<u32, String>,
    im_start: u32,
    im_end: u32,
    newline: u32,
    pad: u32,
    max_token_bytes: usize,
    vocab_size: usize,
}

impl VocabTokenizer {
    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json).map_err(|e| Error::Tokenize {
            msg: format!("invalid vocab file: {e}"),
        })?;
        let SpecialIds {
            im_start,
            im_end,
            pad,
        } = file.special;
        let newline = *file.tokens.get("\n").ok_or_else(|| Error::Tokenize {
            msg: "vocab must contain a \"\\n\" token".into(),
        })?;
        let specials = [im_start, im_end, pad];
        let mut by_id = HashMap::new();
        for (text, &id) in &file.tokens {
            if text.is_empty() {
                return Err(Error::Tokenize {
                    msg: "vocab contains an empty token string".into(),
                });
            }
            if specials.contains(&id) {
                return Err(Error::Tokenize {
                    msg: format!("token {text:?} reuses special id {id}"),
                });
            }
            if let Some(prev) = by_id.insert(id, text.clone()) {
                return Err(Error::Tokenize {
                    msg: format!("tokens {prev:?} and {text:?} share id {id}"),
                });
            }
        }
        let mut distinct = [im_start, im_end, newline, pad];
        distinct.sort_unstable();
        if distinct.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Tokenize {
                msg: "im_start, im_end, newline and pad ids must be pairwise distinct".into(),
            });
        }
        let max_id = file
            .tokens
            .values()
            .copied()
            .chain(specials)
            .max()
            .expect("non-empty by construction");
        let max_token_bytes = file.tokens.keys().map(String::len).max().unwrap_or(0);
        Ok(VocabTokenizer {
            map: file.tokens,
            by_id,
            im_start,
            im_end,
            newline,
            pad,
            max_token_bytes,
            vocab_size: max_id as usize + 1,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }
}

impl Tokenizer for VocabTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let limit = self.max_token_bytes.min(text.len() - pos);
            let hit = (1..=limit)
                .rev()
                .filter(|&len| text.is_char_boundary(pos + len))
                .find_map(|len| self.map.get(&text[pos..pos + len]).map(|&id| (len, id)));
            match hit {
                Some((len, id)) => {
                    ids.push(id);
                    pos += len;
                }
                None => {
                    return Err(Error::Tokenize {
                        msg: format!(
                            "no vocab entry matches input at byte offset {pos} (next: {:?})",
                            text[pos..].chars().next().unwrap_or('\u{fffd}')
                        ),
                    })
                }
            }
        }
        Ok(ids)
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id == self.im_start {
                out.push_str(IM_START_TEXT);
            } else if id == self.im_end {
                out.push_str(IM_END_TEXT);
            } else if id == self.pad {
                // padding renders as nothing
            } else if let Some(text) = self.by_id.get(&id) {
                out.push_str(text);
            } else {
                return Err(Error::Tokenize {
                    msg: format!("id {id} is not in the vocabulary"),
                });
            }
        }
        Ok(out)
    }

    fn im_start_id(&self) -> u32 {
        self.im_start
    }
    fn im_end_id(&self) -> u32 {
        self.im_end
    }
    fn newline_id(&self) -> u32 {
        self.newline
    }
    fn pad_id(&self) -> u32 {
        self.pad
    }
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_tokenizer_maps_bytes_to_ids() {
        let tok = ByteTokenizer;
        assert_eq!(tok.encode("ok").unwrap(), vec![111, 107]);
        // Multi-byte UTF-8 splits into its constituent bytes.
        assert_eq!(tok.encode("é").unwrap(), vec![0xC3, 0xA9]);
        assert_eq!(tok.decode(&[0xC3, 0xA9]).unwrap(), "é");
    }

    #[test]
    fn byte_tokenizer_specials_are_distinct_and_fixed() {
        let tok = ByteTokenizer;
        let ids = [
            tok.im_start_id(),
            tok.im_end_id(),
            tok.newline_id(),
            tok.pad_id(),
        ];
        assert_eq!(ids, [256, 257, 258, 259]);
        assert_eq!(tok.vocab_size(), 260);
    }

    #[test]
    fn byte_tokenizer_never_emits_pad_or_specials_for_text() {
        let tok = ByteTokenizer;
        let ids = tok.encode("some text\nwith a newline").unwrap();
        assert!(ids.iter().all(|&id| id < 256));
    }

    #[test]
    fn byte_decode_renders_markers_and_skips_pad() {
        let tok = ByteTokenizer;
        let ids = [ByteTokenizer::IM_START, 104, 105, ByteTokenizer::IM_END, ByteTokenizer::PAD];
        assert_eq!(tok.decode(&ids).unwrap(), "<|im_start|>hi<|im_end|>");
        assert!(tok.decode(&[300]).is_err());
    }

    fn tiny_vocab() -> VocabTokenizer {
        VocabTokenizer::from_json(
            r#"{
                "tokens": {"ab": 5, "a": 6, "b": 7, "\n": 8, "cd": 9},
                "special": {"im_start": 0, "im_end": 1, "pad": 2}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn vocab_tokenizer_prefers_longest_match() {
        let tok = tiny_vocab();
        assert_eq!(tok.encode("ab").unwrap(), vec![5]);
        assert_eq!(tok.encode("aab").unwrap(), vec![6, 5]);
        assert_eq!(tok.encode("ba\ncd").unwrap(), vec![7, 6, 8, 9]);
        assert_eq!(tok.decode(&[7, 6, 8, 9]).unwrap(), "ba\ncd");
    }

    #[test]
    fn vocab_tokenizer_reports_unencodable_input() {
        let err = tiny_vocab().encode("abz").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte offset 2"), "{msg}");
        assert!(msg.contains('z'), "{msg}");
    }

    #[test]
    fn vocab_tokenizer_exposes_newline_entry_as_special() {
        let tok = tiny_vocab();
        assert_eq!(tok.newline_id(), 8);
        assert_eq!(tok.vocab_size(), 10);
    }

    #[test]
    fn vocab_file_validation_rejects_bad_tables() {
        // Missing "\n" entry.
        let err = VocabTokenizer::from_json(
            r#"{"tokens": {"a": 5}, "special": {"im_start": 0, "im_end": 1, "pad": 2}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("\\n"), "{err}");
        // Token colliding with a special id.
        assert!(VocabTokenizer::from_json(
            r#"{"tokens": {"a": 0, "\n": 8}, "special": {"im_start": 0, "im_end": 1, "pad": 2}}"#,
        )
        .is_err());
        // Two tokens sharing one id.
        assert!(VocabTokenizer::from_json(
            r#"{"tokens": {"a": 5, "b": 5, "\n": 8}, "special": {"im_start": 0, "im_end": 1, "pad": 2}}"#,
        )
        .is_err());
        // Specials not distinct.
        assert!(VocabTokenizer::from_json(
            r#"{"tokens": {"\n": 8}, "special": {"im_start": 0, "im_end": 0, "pad": 2}}"#,
        )
        .is_err());
    }
}
