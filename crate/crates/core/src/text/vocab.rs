use std::collections::HashMap;
use std::path::Path;

use super::{TextError, RESERVED, UNK_ID};

/// Bijective token <-> id mapping. Ids `0..RESERVED.len()` hold the
/// reserved tokens, `xxpad` first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string())).expect("distinct reserved tokens")
    }

    /// Builds a vocabulary from tokens in id order. The reserved tokens must
    /// come first, in order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self, TextError> {
        let id_to_token: Vec<String> = tokens.into_iter().collect();
        if id_to_token.len() < RESERVED.len()
            || id_to_token.iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(TextError::Invalid(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(TextError::Invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Maps tokens to ids; unknown tokens become `xxunk`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }

    /// Maps ids back to tokens. Out-of-range ids decode as `xxunk`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK_ID]).to_string())
            .collect()
    }

    /// Newline-delimited tokens in id order, with `\\`, `\n`, `\r` and `\t` escaped.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            for c in t.chars() {
                match c {
                    '\\' => s.push_str("\\\\"),
                    '\n' => s.push_str("\\n"),
                    '\r' => s.push_str("\\r"),
                    '\t' => s.push_str("\\t"),
                    c => s.push(c),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TextError> {
        let mut tokens = Vec::new();
        for (ln, line) in text.split_terminator('\n').enumerate() {
            let mut tok = String::new();
            let mut chars = line.chars();
            while let Some(c) = chars.next() {
                if c != '\\' {
                    tok.push(c);
                    continue;
                }
                match chars.next() {
                    Some('\\') => tok.push('\\'),
                    Some('n') => tok.push('\n'),
                    Some('r') => tok.push('\r'),
                    Some('t') => tok.push('\t'),
                    other => {
                        return Err(TextError::Parse {
                            path: "<vocab>".into(),
                            line: ln + 1,
                            msg: format!("bad escape \\{}", other.map(String::from).unwrap_or_default()),
                        })
                    }
                }
            }
            tokens.push(tok);
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        std::fs::write(path, self.to_text()).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }
}

/// Keeps the most frequent tokens (ties broken lexicographically) with at
/// least `min_freq` occurrences, up to `max_size` entries including the
/// reserved tokens.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[Vec<S>],
    max_size: usize,
    min_freq: usize,
) -> Result<Vocab, TextError> {
    if max_size < RESERVED.len() {
        return Err(TextError::Invalid(format!(
            "max_size {max_size} is smaller than the {} reserved tokens",
            RESERVED.len()
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for t in doc {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(
            ranked
                .into_iter()
                .take(max_size - RESERVED.len())
                .map(|(t, _)| t.to_string()),
        );
    Vocab::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, TokenizeMode};

    fn corpus(s: &str) -> Vec<Vec<String>> {
        vec![tokenize(s, TokenizeMode::Word)]
    }

    #[test]
    fn keeps_frequent_tokens() {
        let v = build_vocab(&corpus("a a b"), 10, 1).unwrap();
        assert_eq!(v.len(), RESERVED.len() + 2);
        assert_eq!(v.id("a"), Some(RESERVED.len()));
        assert_eq!(v.id("b"), Some(RESERVED.len() + 1));
        assert_eq!(v.id("xxpad"), Some(0));
    }

    #[test]
    fn min_freq_excludes_rare() {
        let v = build_vocab(&corpus("a a b"), 10, 2).unwrap();
        assert_eq!(v.id("b"), None);
        assert_eq!(v.encode(&["b"]), vec![UNK_ID]);
    }

    #[test]
    fn empty_corpus_gives_reserved_only() {
        let v = build_vocab::<String>(&[], 10, 1).unwrap();
        assert_eq!(v, Vocab::reserved_only());
    }

    #[test]
    fn ties_are_lexicographic_and_size_capped() {
        let v = build_vocab(&corpus("c b a c b a d"), RESERVED.len() + 2, 1).unwrap();
        assert_eq!(&v.tokens()[RESERVED.len()..], &["a", "b"]);
    }

    #[test]
    fn max_size_below_reserved_is_rejected() {
        assert!(build_vocab(&corpus("a"), 3, 1).is_err());
    }

    #[test]
    fn text_round_trip_with_control_chars() {
        let chars: Vec<Vec<String>> = vec![tokenize("a\nb\t\\ c", TokenizeMode::Char)];
        let v = build_vocab(&chars, 100, 1).unwrap();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn encode_decode_identity_in_vocab() {
        let toks = tokenize("The cat sat on the MAT", TokenizeMode::Word);
        let v = build_vocab(std::slice::from_ref(&toks), 100, 1).unwrap();
        assert_eq!(v.decode(&v.encode(&toks)), toks);
    }
}
