use serde::{Deserialize, Serialize};

use super::{MAJ, REP, RESERVED, UNK, UP, WREP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizeMode {
    Word,
    Char,
}

/// Splits text into raw word-level pieces: runs of alphanumerics (and
/// apostrophes) and runs of a single repeated punctuation character.
pub fn raw_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut cur_word = false;
    let flush = |cur: &mut String, out: &mut Vec<String>| {
        if !cur.is_empty() {
            out.push(std::mem::take(cur));
        }
    };
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut cur, &mut out);
            continue;
        }
        let is_word = ch.is_alphanumeric() || ch == '\'';
        let continues = !cur.is_empty()
            && if is_word {
                cur_word
            } else {
                !cur_word && cur.ends_with(ch)
            };
        if !continues {
            flush(&mut cur, &mut out);
        }
        cur.push(ch);
        cur_word = is_word;
    }
    flush(&mut cur, &mut out);
    out
}

fn case_marker(word: &str) -> Option<&'static str> {
    let letters: Vec<char> = word.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.is_empty() || !letters[0].is_uppercase() {
        return None;
    }
    if letters.len() > 1 && letters.iter().all(|c| c.is_uppercase()) {
        Some(UP)
    } else if word.chars().skip(1).all(|c| !c.is_uppercase()) && word.starts_with(letters[0]) {
        Some(MAJ)
    } else {
        // Mixed case such as "McDonald" is lowercased without a marker.
        None
    }
}

/// A word ending in a run of at least three identical characters.
fn trailing_run(word: &str) -> Option<(usize, String)> {
    let chars: Vec<char> = word.chars().collect();
    let last = *chars.last()?;
    let n = chars.iter().rev().take_while(|&&c| c == last).count();
    (n >= 3).then(|| {
        let mut collapsed: String = chars[..chars.len() - n].iter().collect();
        collapsed.push(last);
        (n, collapsed)
    })
}

fn encode_word(raw: &str, out: &mut Vec<String>) {
    if RESERVED.contains(&raw) {
        out.push(UNK.to_string());
        return;
    }
    if let Some(m) = case_marker(raw) {
        out.push(m.to_string());
    }
    let lower = raw.to_lowercase();
    match trailing_run(&lower) {
        Some((n, collapsed)) => {
            out.push(REP.to_string());
            out.push(n.to_string());
            out.push(collapsed);
        }
        None => out.push(lower),
    }
}

/// Tokenizes `text`.
///
/// Word mode lowercases and inserts markers: `xxup` before an all-caps word,
/// `xxmaj` before a capitalised word, `xxrep n w` for a word whose trailing
/// character run of length `n >= 3` is collapsed to one character in `w`, and
/// `xxwrep n ...` for a word repeated `n >= 3` times in a row. Char mode
/// emits every character, whitespace included, with no markers.
pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Char => text.chars().map(|c| c.to_string()).collect(),
        TokenizeMode::Word => {
            let raw = raw_tokens(text);
            let mut out = Vec::with_capacity(raw.len());
            let mut i = 0;
            while i < raw.len() {
                let n = raw[i..].iter().take_while(|w| **w == raw[i]).count();
                if n >= 3 {
                    out.push(WREP.to_string());
                    out.push(n.to_string());
                    encode_word(&raw[i], &mut out);
                    i += n;
                } else {
                    encode_word(&raw[i], &mut out);
                    i += 1;
                }
            }
            out
        }
    }
}

fn decode_word<'a>(toks: &mut std::iter::Peekable<impl Iterator<Item = &'a str>>) -> Option<String> {
    let mut case = None;
    let mut tok = toks.next()?;
    if tok == UP || tok == MAJ {
        case = Some(tok);
        tok = toks.next()?;
    }
    let mut word = if tok == REP {
        let n: usize = toks.next()?.parse().ok()?;
        let collapsed = toks.next()?;
        let last = collapsed.chars().last()?;
        let mut w: String = collapsed.to_string();
        w.extend(std::iter::repeat_n(last, n - 1));
        w
    } else {
        tok.to_string()
    };
    match case {
        Some(UP) => word = word.to_uppercase(),
        Some(_) => {
            let mut cs = word.chars();
            if let Some(first) = cs.next() {
                word = first.to_uppercase().chain(cs).collect();
            }
        }
        None => {}
    }
    Some(word)
}

/// Inverse of word-mode [`tokenize`]: expands markers and joins the raw
/// pieces with single spaces.
pub fn detokenize(tokens: &[String]) -> String {
    let mut it = tokens.iter().map(String::as_str).peekable();
    let mut words = Vec::new();
    while let Some(&tok) = it.peek() {
        if tok == WREP {
            it.next();
            let n: usize = it.next().and_then(|s| s.parse().ok()).unwrap_or(1);
            if let Some(w) = decode_word(&mut it) {
                words.extend(std::iter::repeat_n(w, n));
            }
        } else if let Some(w) = decode_word(&mut it) {
            words.push(w);
        }
    }
    words.join(" ")
}
