//! Tokenization, vocabulary and batch assembly.

mod batch;
mod io;
mod tokenize;
mod vocab;

pub use batch::{bpt3c_chunks, lm_batches, DocChunks, LengthJitter, LmBatch};
pub use io::{read_labeled, read_lm_corpus, LabeledDoc};
pub use tokenize::{detokenize, raw_tokens, tokenize, TokenizeMode};
pub use vocab::{build_vocab, Vocab};

use thiserror::Error;

pub const PAD: &str = "xxpad";
pub const UNK: &str = "xxunk";
pub const BOS: &str = "xxbos";
pub const EOS: &str = "xxeos";
pub const UP: &str = "xxup";
pub const MAJ: &str = "xxmaj";
pub const REP: &str = "xxrep";
pub const WREP: &str = "xxwrep";

/// Reserved tokens in id order: `xxpad` is always id 0.
pub const RESERVED: [&str; 8] = [PAD, UNK, BOS, EOS, UP, MAJ, REP, WREP];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("token stream of {len} ids is too short for {batch_size} columns (need at least {needed})")]
    StreamTooShort {
        len: usize,
        batch_size: usize,
        needed: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}
