//! Greedy longest-match subword tokenizer over a fixed vocabulary.

use std::collections::HashMap;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
}

impl SpecialIds {
    pub fn contains(&self, id: TokenId) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Normalization {
    pub nfc: bool,
    pub lowercase: bool,
}

/// One token with its byte span in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Piece {
    pub id: TokenId,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, TokenId>,
    special: SpecialIds,
    continuation_prefix: String,
    max_piece_chars: usize,
    normalization: Normalization,
}

impl Vocab {
    /// Builds a vocabulary where the position of each piece is its id.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Vocab> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::Config(format!("empty vocabulary piece at id {i}")));
            }
            if index.insert(p.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary piece `{p}`")));
            }
        }
        let find = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary lacks special token {s}")))
        };
        let special = SpecialIds {
            pad: find(PAD)?,
            unk: find(UNK)?,
            cls: find(CLS)?,
            sep: find(SEP)?,
            mask: find(MASK)?,
        };
        let max_piece_chars = pieces.iter().map(|p| p.chars().count()).max().unwrap_or(1);
        Ok(Vocab {
            pieces,
            index,
            special,
            continuation_prefix: "##".into(),
            max_piece_chars,
            normalization: Normalization::default(),
        })
    }

    /// Loads a newline-delimited vocabulary; line number is the id.
    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_pieces(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.pieces.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Specials followed by `words`, padded with `[unusedN]` to a multiple of 64.
    pub fn synthetic<S: AsRef<str>>(words: &[S]) -> Result<Vocab> {
        let mut pieces: Vec<String> = [PAD, UNK, CLS, SEP, MASK].map(String::from).to_vec();
        pieces.extend(words.iter().map(|w| w.as_ref().to_string()));
        let mut n = 0;
        while pieces.len() % 64 != 0 {
            pieces.push(format!("[unused{n}]"));
            n += 1;
        }
        Self::from_pieces(pieces)
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn with_continuation_prefix(mut self, prefix: &str) -> Self {
        self.continuation_prefix = prefix.to_string();
        self
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Ids of ordinary (non-special, non-`[unused…]`) pieces.
    pub fn regular_ids(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId)
            .filter(|&i| {
                !self.special.contains(i) && !self.pieces[i as usize].starts_with("[unused")
            })
            .collect()
    }

    fn normalize(&self, word: &str) -> String {
        let mut s: String = if self.normalization.nfc {
            word.nfc().collect()
        } else {
            word.to_string()
        };
        if self.normalization.lowercase {
            s = s.to_lowercase();
        }
        s
    }

    /// Tokenizes with byte offsets into `text`. Words are whitespace-separated;
    /// a word with no full greedy segmentation becomes a single `[UNK]`.
    pub fn encode_with_offsets(&self, text: &str) -> Vec<Piece> {
        let mut out = Vec::new();
        for (word_start, word) in split_words(text) {
            let norm = self.normalize(word);
            let aligned = norm.len() == word.len();
            let word_end = word_start + word.len();
            let chars: Vec<(usize, char)> = norm.char_indices().collect();
            let mut pieces = Vec::new();
            let mut ci = 0;
            let mut failed = false;
            while ci < chars.len() {
                let mut found = None;
                let hi = chars.len().min(ci + self.max_piece_chars);
                for cj in (ci + 1..=hi).rev() {
                    let b0 = chars[ci].0;
                    let b1 = chars.get(cj).map_or(norm.len(), |c| c.0);
                    let sub = &norm[b0..b1];
                    let id = if ci == 0 {
                        self.index.get(sub)
                    } else {
                        self.index.get(&format!("{}{}", self.continuation_prefix, sub))
                    };
                    if let Some(&id) = id {
                        found = Some((id, cj, b0, b1));
                        break;
                    }
                }
                match found {
                    Some((id, cj, b0, b1)) => {
                        let (start, end) = if aligned {
                            (word_start + b0, word_start + b1)
                        } else {
                            (word_start, word_end)
                        };
                        pieces.push(Piece { id, start, end });
                        ci = cj;
                    }
                    None => {
                        failed = true;
                        break;
                    }
                }
            }
            if failed {
                out.push(Piece {
                    id: self.special.unk,
                    start: word_start,
                    end: word_end,
                });
            } else {
                out.extend(pieces);
            }
        }
        out
    }

    pub fn encode(&self, text: &str, add_specials: bool) -> Vec<TokenId> {
        let body = self.encode_with_offsets(text).into_iter().map(|p| p.id);
        if add_specials {
            std::iter::once(self.special.cls)
                .chain(body)
                .chain(std::iter::once(self.special.sep))
                .collect()
        } else {
            body.collect()
        }
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.encode_with_offsets(text).len()
    }

    /// Joins pieces back into text: continuation pieces attach to the previous
    /// piece, everything else is space-separated.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            let piece = self.piece(id).unwrap_or(UNK);
            match piece.strip_prefix(self.continuation_prefix.as_str()) {
                Some(rest) if !s.is_empty() => s.push_str(rest),
                _ => {
                    if !s.is_empty() {
                        s.push(' ');
                    }
                    s.push_str(piece);
                }
            }
        }
        s
    }
}

/// Whitespace-separated words with their byte offsets.
pub fn split_words(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut rest = text.char_indices().peekable();
    std::iter::from_fn(move || {
        while let Some(&(_, c)) = rest.peek() {
            if c.is_whitespace() {
                rest.next();
            } else {
                break;
            }
        }
        let (start, _) = *rest.peek()?;
        let mut end = text.len();
        while let Some(&(i, c)) = rest.peek() {
            if c.is_whitespace() {
                end = i;
                break;
            }
            rest.next();
        }
        Some((start, &text[start..end]))
    })
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> Vocab {
        Vocab::synthetic(&["a", "b", "ab", "##c"]).unwrap()
    }

    #[test]
    fn empty_text_with_specials() {
        let v = toy();
        let s = v.special();
        assert_eq!(v.encode("", true), vec![s.cls, s.sep]);
        assert_eq!(v.count_tokens(""), 0);
    }

    #[test]
    fn greedy_longest_match() {
        let v = toy();
        let ids = v.encode("abc", false);
        assert_eq!(ids, vec![v.id("ab").unwrap(), v.id("##c").unwrap()]);
        assert_eq!(v.count_tokens("abc"), 2);
    }

    #[test]
    fn unknown_word_is_unk() {
        let v = toy();
        assert_eq!(v.encode("∅", false), vec![v.special().unk]);
        // partial segmentation still collapses to a single UNK
        assert_eq!(v.encode("abz", false), vec![v.special().unk]);
    }

    #[test]
    fn repeated_word_counts() {
        let v = toy();
        let doc = vec!["ab"; 37].join(" ");
        assert_eq!(v.count_tokens(&doc), 37);
    }

    #[test]
    fn offsets_cover_pieces() {
        let v = toy();
        let text = "  abc\tb ";
        let p = v.encode_with_offsets(text);
        assert_eq!(p.len(), 3);
        assert_eq!(&text[p[0].start..p[0].end], "ab");
        assert_eq!(&text[p[1].start..p[1].end], "c");
        assert_eq!(&text[p[2].start..p[2].end], "b");
    }

    #[test]
    fn lowercase_normalization_is_opt_in() {
        let v = toy();
        assert_eq!(v.encode("AB", false), vec![v.special().unk]);
        let v = v.with_normalization(Normalization { nfc: true, lowercase: true });
        assert_eq!(v.encode("AB", false), vec![v.id("ab").unwrap()]);
    }

    #[test]
    fn nfc_merges_combining_marks() {
        let v = Vocab::synthetic(&["é"]).unwrap();
        let decomposed = "e\u{301}";
        assert_eq!(v.encode(decomposed, false), vec![v.special().unk]);
        let v = v.with_normalization(Normalization { nfc: true, lowercase: false });
        let p = v.encode_with_offsets(decomposed);
        assert_eq!(p[0].id, v.id("é").unwrap());
        assert_eq!((p[0].start, p[0].end), (0, decomposed.len()));
    }

    #[test]
    fn missing_special_rejected() {
        let r = Vocab::from_pieces(vec!["[PAD]".into(), "x".into()]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = toy();
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(back.pieces(), v.pieces());
        assert_eq!(back.len() % 64, 0);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode_for_in_vocab_words(
            picks in proptest::collection::vec(0usize..3, 1..8),
            tail in proptest::collection::vec(proptest::bool::ANY, 1..8),
        ) {
            let v = Vocab::synthetic(&["a", "b", "ab", "##c", "##a"]).unwrap();
            let heads = ["a", "b", "ab"];
            let words: Vec<String> = picks
                .iter()
                .zip(tail.iter().chain(std::iter::repeat(&false)))
                .map(|(&i, &c)| format!("{}{}", heads[i], if c { "c" } else { "" }))
                .collect();
            let text = words.join(" ");
            let ids = v.encode(&text, false);
            prop_assert!(ids.iter().all(|&i| (i as usize) < v.len()));
            prop_assert!(!ids.contains(&v.special().unk));
            prop_assert_eq!(v.decode(&ids), text);
        }
    }
}
