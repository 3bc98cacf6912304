use std::path::Path;

use super::TextError;

/// A classification example read from a `label<TAB>text` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDoc {
    pub label: String,
    pub text: String,
}

fn read(path: &Path) -> Result<String, TextError> {
    std::fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a contiguous language-model corpus.
pub fn read_lm_corpus(path: &Path) -> Result<String, TextError> {
    read(path)
}

/// Reads one `label<TAB>text` example per line; blank lines are skipped.
pub fn read_labeled(path: &Path) -> Result<Vec<LabeledDoc>, TextError> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (label, body) = line.split_once('\t').ok_or_else(|| TextError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected label<TAB>text".into(),
            })?;
            Ok(LabeledDoc {
                label: label.trim().to_string(),
                text: body.to_string(),
            })
        })
        .collect()
}
