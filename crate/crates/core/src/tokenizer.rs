//! WordPiece tokenization and BERT-style single / paired input encoding.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Default maximum sequence length.
pub const DEFAULT_MAX_LEN: usize = 64;

const MAX_WORD_CHARS: usize = 100;

/// Token ↔ id mapping with resolved special-token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    pub pad_id: u32,
    pub unk_id: u32,
    pub cls_id: u32,
    pub sep_id: u32,
}

impl Vocab {
    /// Builds a vocabulary where each token's id is its index.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!(
                    "duplicate vocabulary token `{t}` at line {}",
                    i + 1
                )));
            }
        }
        let special = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary is missing {name}")))
        };
        Ok(Self {
            pad_id: special(PAD)?,
            unk_id: special(UNK)?,
            cls_id: special(CLS)?,
            sep_id: special(SEP)?,
            tokens,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.pad_id || id == self.unk_id || id == self.cls_id || id == self.sep_id
    }

    /// One token per line, LF-terminated.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::with_capacity(self.tokens.len() * 8);
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads a vocabulary file: UTF-8, one token per line, line number = id.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::from_tokens(text.lines())
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || !(c.is_alphanumeric() || c.is_whitespace() || c.is_control())
}

/// Lowercases, splits on whitespace and makes every punctuation mark its own word.
pub fn basic_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match-first WordPiece over the output of [`basic_tokenize`].
pub fn wordpiece_tokenize(text: &str, vocab: &Vocab) -> Vec<String> {
    let mut out = Vec::new();
    for word in basic_tokenize(text) {
        match wordpiece_word(&word, vocab) {
            Some(pieces) => out.extend(pieces),
            None => out.push(UNK.to_string()),
        }
    }
    out
}

fn wordpiece_word(word: &str, vocab: &Vocab) -> Option<Vec<String>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate.insert_str(0, "##");
            }
            if vocab.id(&candidate).is_some() {
                found = Some(candidate);
                break;
            }
            end -= 1;
        }
        pieces.push(found?);
        start = end;
    }
    Some(pieces)
}

fn token_ids(text: &str, vocab: &Vocab) -> Vec<u32> {
    wordpiece_tokenize(text, vocab)
        .iter()
        .map(|t| vocab.id(t).unwrap_or(vocab.unk_id))
        .collect()
}

/// Model input for one single or paired sequence, padded to `max_len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    /// 1 at `[CLS]`, `[SEP]` and `[PAD]` positions.
    pub special_mask: Vec<u8>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad positions; they always form a prefix.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    fn build(tokens: Vec<(u32, u8, bool)>, max_len: usize, pad_id: u32) -> Self {
        let mut enc = Encoding {
            ids: Vec::with_capacity(max_len),
            segment_ids: Vec::with_capacity(max_len),
            attention_mask: Vec::with_capacity(max_len),
            special_mask: Vec::with_capacity(max_len),
        };
        for (id, seg, special) in tokens {
            enc.ids.push(id);
            enc.segment_ids.push(seg);
            enc.attention_mask.push(1);
            enc.special_mask.push(special as u8);
        }
        while enc.ids.len() < max_len {
            enc.ids.push(pad_id);
            enc.segment_ids.push(0);
            enc.attention_mask.push(0);
            enc.special_mask.push(1);
        }
        enc
    }
}

/// `[CLS] text [SEP]` padded to `max_len`; text tokens truncated to `max_len − 2`.
pub fn encode_single(text: &str, vocab: &Vocab, max_len: usize) -> Result<Encoding> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len {max_len} < 2 for a single encoding")));
    }
    let mut ids = token_ids(text, vocab);
    ids.truncate(max_len - 2);
    let mut tokens = Vec::with_capacity(ids.len() + 2);
    tokens.push((vocab.cls_id, 0, true));
    tokens.extend(ids.into_iter().map(|id| (id, 0, false)));
    tokens.push((vocab.sep_id, 0, true));
    Ok(Encoding::build(tokens, max_len, vocab.pad_id))
}

/// `[CLS] a [SEP] b [SEP]` padded to `max_len`.
///
/// Segment 0 runs through the first `[SEP]`. When the pair does not fit, one
/// token at a time is dropped from the end of the longer side (`b` on ties).
/// `self_pair` replaces `b` with `a`.
pub fn encode_pair(a: &str, b: &str, vocab: &Vocab, max_len: usize, self_pair: bool) -> Result<Encoding> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len {max_len} < 3 for a paired encoding")));
    }
    let mut ids_a = token_ids(a, vocab);
    let mut ids_b = if self_pair { ids_a.clone() } else { token_ids(b, vocab) };
    let budget = max_len - 3;
    while ids_a.len() + ids_b.len() > budget {
        if ids_a.len() > ids_b.len() {
            ids_a.pop();
        } else {
            ids_b.pop();
        }
    }
    let mut tokens = Vec::with_capacity(ids_a.len() + ids_b.len() + 3);
    tokens.push((vocab.cls_id, 0, true));
    tokens.extend(ids_a.into_iter().map(|id| (id, 0, false)));
    tokens.push((vocab.sep_id, 0, true));
    tokens.extend(ids_b.into_iter().map(|id| (id, 1, false)));
    tokens.push((vocab.sep_id, 1, true));
    Ok(Encoding::build(tokens, max_len, vocab.pad_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(extra: &[&str]) -> Vocab {
        let mut t = vec![PAD, UNK, CLS, SEP];
        t.extend_from_slice(extra);
        Vocab::from_tokens(t).unwrap()
    }

    #[test]
    fn load_six_line_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        std::fs::write(&p, "[PAD]\n[UNK]\n[CLS]\n[SEP]\nhello\n##lo\n").unwrap();
        let v = load_vocab(&p).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("##lo"), Some(5));
        assert_eq!(v.pad_id, 0);
    }

    #[test]
    fn missing_pad_is_a_config_error() {
        let err = Vocab::from_tokens(["[UNK]", "[CLS]", "[SEP]", "x"]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn duplicate_token_is_a_format_error() {
        let err = Vocab::from_tokens(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "a"]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn wordpiece_cases() {
        let v = vocab(&["un", "##der", "##stand"]);
        assert!(wordpiece_tokenize("", &v).is_empty());
        assert_eq!(wordpiece_tokenize("zzz", &v), vec![UNK]);
        assert_eq!(wordpiece_tokenize("understand", &v), vec!["un", "##der", "##stand"]);
        assert_eq!(wordpiece_tokenize("UNDERSTAND", &v), vec!["un", "##der", "##stand"]);
        // A failed continuation turns the whole word into [UNK].
        assert_eq!(wordpiece_tokenize("underx", &v), vec![UNK]);
    }

    #[test]
    fn punctuation_splits_into_words() {
        assert_eq!(basic_tokenize("Hello, world!"), vec!["hello", ",", "world", "!"]);
        assert_eq!(basic_tokenize("  a\tb\n"), vec!["a", "b"]);
    }

    #[test]
    fn overlong_word_is_unknown() {
        let long = "a".repeat(101);
        let v = vocab(&["a", "##a"]);
        assert_eq!(wordpiece_tokenize(&long, &v), vec![UNK]);
        assert_eq!(wordpiece_tokenize(&"a".repeat(100), &v).len(), 100);
    }

    #[test]
    fn encode_single_cases() {
        let v = vocab(&["x", "y"]);
        let e = encode_single("", &v, 6).unwrap();
        assert_eq!(e.ids, vec![v.cls_id, v.sep_id, 0, 0, 0, 0]);
        assert_eq!(e.attention_mask.iter().filter(|&&m| m == 1).count(), 2);

        let e = encode_single("x y x y x y", &v, 5).unwrap();
        assert_eq!(e.ids, vec![v.cls_id, 4, 5, 4, v.sep_id]);

        let e = encode_single("x", &v, 5).unwrap();
        assert_eq!(e.real_len(), 3);
        assert_eq!(e.special_mask, vec![1, 0, 1, 1, 1]);
        assert_eq!(e.segment_ids, vec![0; 5]);

        assert!(matches!(encode_single("x", &v, 1), Err(Error::Config(_))));
    }

    #[test]
    fn encode_pair_cases() {
        let v = vocab(&["x", "y"]);
        let e = encode_pair("", "", &v, 3, false).unwrap();
        assert_eq!(e.ids, vec![v.cls_id, v.sep_id, v.sep_id]);

        let e = encode_pair("x", "ignored", &v, 8, true).unwrap();
        assert_eq!(&e.ids[..5], &[v.cls_id, 4, v.sep_id, 4, v.sep_id]);
        assert_eq!(&e.segment_ids[..5], &[0, 0, 0, 1, 1]);

        let a = vec!["x"; 10].join(" ");
        let e = encode_pair(&a, "y y", &v, 10, false).unwrap();
        let xs = e.ids.iter().filter(|&&i| i == 4).count();
        let ys = e.ids.iter().filter(|&&i| i == 5).count();
        assert_eq!((xs, ys), (5, 2));
        assert_eq!(e.real_len(), 10);

        assert!(matches!(encode_pair("x", "y", &v, 2, false), Err(Error::Config(_))));
    }

    #[test]
    fn self_pair_matches_explicit_pair() {
        let v = vocab(&["x", "y", "##y"]);
        for text in ["", "x", "x yy y", "x y x y x y x y x"] {
            for max_len in [3, 5, 8, 16] {
                assert_eq!(
                    encode_pair(text, text, &v, max_len, false).unwrap(),
                    encode_pair(text, "whatever", &v, max_len, true).unwrap()
                );
            }
        }
    }

    #[test]
    fn ids_round_trip() {
        let v = vocab(&["hello", "##lo"]);
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
    }
}
