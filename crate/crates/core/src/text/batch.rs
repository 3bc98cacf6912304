use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{TextError, PAD_ID};

/// One BPTT window: `inputs` and `targets` are row-major `[len x batch_size]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub len: usize,
    pub batch_size: usize,
}

impl LmBatch {
    pub fn input(&self, t: usize, b: usize) -> usize {
        self.inputs[t * self.batch_size + b]
    }

    pub fn target(&self, t: usize, b: usize) -> usize {
        self.targets[t * self.batch_size + b]
    }
}

/// Variable-length BPTT: with probability `p_full` the window length is
/// drawn from `Normal(bptt, sd)`, otherwise from `Normal(bptt / 2, sd)`,
/// rounded and clamped to `[min(5, bptt), 2 * bptt]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthJitter {
    pub p_full: f64,
    pub sd: f64,
}

impl Default for LengthJitter {
    fn default() -> Self {
        Self { p_full: 0.95, sd: 5.0 }
    }
}

impl LengthJitter {
    pub fn sample<R: Rng + ?Sized>(&self, bptt: usize, rng: &mut R) -> usize {
        let center = if rng.random::<f64>() < self.p_full {
            bptt as f64
        } else {
            bptt as f64 / 2.0
        };
        let x = Normal::new(center, self.sd)
            .expect("finite sd")
            .sample(rng)
            .round();
        let lo = bptt.clamp(1, 5) as f64;
        x.clamp(lo, 2.0 * bptt as f64) as usize
    }
}

/// Splits `stream` into `batch_size` contiguous columns and cuts them into
/// windows of (about) `bptt` rows. The ragged tail that does not fill every
/// column is dropped.
pub fn lm_batches<R: Rng + ?Sized>(
    stream: &[usize],
    batch_size: usize,
    bptt: usize,
    jitter: Option<LengthJitter>,
    rng: &mut R,
) -> Result<Vec<LmBatch>, TextError> {
    if batch_size == 0 || bptt == 0 {
        return Err(TextError::Invalid("batch_size and bptt must be positive".into()));
    }
    if stream.len() < batch_size * 2 {
        return Err(TextError::StreamTooShort {
            len: stream.len(),
            batch_size,
            needed: batch_size * 2,
        });
    }
    let col_len = stream.len() / batch_size;
    let at = |t: usize, b: usize| stream[b * col_len + t];
    let mut out = Vec::new();
    let mut i = 0;
    while i + 1 < col_len {
        let want = match jitter {
            Some(j) => j.sample(bptt, rng),
            None => bptt,
        };
        let len = want.min(col_len - 1 - i);
        let mut inputs = Vec::with_capacity(len * batch_size);
        let mut targets = Vec::with_capacity(len * batch_size);
        for t in i..i + len {
            for b in 0..batch_size {
                inputs.push(at(t, b));
                targets.push(at(t + 1, b));
            }
        }
        out.push(LmBatch {
            inputs,
            targets,
            len,
            batch_size,
        });
        i += len;
    }
    Ok(out)
}

/// One minibatch of documents, front-padded to a common multiple of the
/// chunk length and cut into `[chunk_len x batch_size]` row-major chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocChunks {
    pub chunks: Vec<Vec<usize>>,
    pub chunk_len: usize,
    pub batch_size: usize,
    /// True (unpadded) length of each document.
    pub lengths: Vec<usize>,
    pub pad_id: usize,
}

impl DocChunks {
    pub fn from_docs<D: AsRef<[usize]>>(docs: &[D], chunk_len: usize) -> Result<Self, TextError> {
        if chunk_len == 0 {
            return Err(TextError::Invalid("chunk length must be at least 1".into()));
        }
        if docs.is_empty() || docs.iter().any(|d| d.as_ref().is_empty()) {
            return Err(TextError::Invalid("documents must be non-empty".into()));
        }
        let lengths: Vec<usize> = docs.iter().map(|d| d.as_ref().len()).collect();
        let max = *lengths.iter().max().unwrap();
        let padded = max.div_ceil(chunk_len) * chunk_len;
        let bsz = docs.len();
        let mut chunks = vec![vec![PAD_ID; chunk_len * bsz]; padded / chunk_len];
        for (b, doc) in docs.iter().enumerate() {
            let doc = doc.as_ref();
            let offset = padded - doc.len();
            for (k, &id) in doc.iter().enumerate() {
                let pos = offset + k;
                chunks[pos / chunk_len][(pos % chunk_len) * bsz + b] = id;
            }
        }
        Ok(Self {
            chunks,
            chunk_len,
            batch_size: bsz,
            lengths,
            pad_id: PAD_ID,
        })
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn padded_len(&self) -> usize {
        self.chunks.len() * self.chunk_len
    }

    /// `true` where chunk `k` holds real content, row-major `[chunk_len x batch]`.
    pub fn mask(&self, k: usize) -> Vec<bool> {
        let padded = self.padded_len();
        let mut m = Vec::with_capacity(self.chunk_len * self.batch_size);
        for t in 0..self.chunk_len {
            let pos = k * self.chunk_len + t;
            for &len in &self.lengths {
                m.push(pos >= padded - len);
            }
        }
        m
    }

    /// Concatenates column `b` across chunks and strips the front padding.
    pub fn reassemble(&self, b: usize) -> Vec<usize> {
        let full: Vec<usize> = self
            .chunks
            .iter()
            .flat_map(|c| (0..self.chunk_len).map(move |t| c[t * self.batch_size + b]))
            .collect();
        full[self.padded_len() - self.lengths[b]..].to_vec()
    }
}

/// Groups `docs` into minibatches of `batch_size` (in order) and chunks each.
pub fn bpt3c_chunks<D: AsRef<[usize]>>(
    docs: &[D],
    batch_size: usize,
    chunk_len: usize,
) -> Result<Vec<DocChunks>, TextError> {
    if batch_size == 0 {
        return Err(TextError::Invalid("batch_size must be positive".into()));
    }
    if docs.is_empty() {
        return Err(TextError::Invalid("no documents".into()));
    }
    docs.chunks(batch_size)
        .map(|group| DocChunks::from_docs(group, chunk_len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn hand_layout_of_first_batch() {
        let stream: Vec<usize> = (1..=13).collect();
        let batches = lm_batches(&stream, 2, 3, None, &mut rng()).unwrap();
        assert_eq!(batches[0].inputs, vec![1, 7, 2, 8, 3, 9]);
        assert_eq!(batches[0].targets, vec![2, 8, 3, 9, 4, 10]);
        assert_eq!(batches[1].inputs, vec![4, 10, 5, 11]);
        assert_eq!(batches[1].targets, vec![5, 11, 6, 12]);
        assert_eq!(batches.len(), 2);
    }

    #[test]
    fn fixed_length_without_jitter() {
        let stream: Vec<usize> = (0..1000).collect();
        let batches = lm_batches(&stream, 4, 7, None, &mut rng()).unwrap();
        let n = batches.len();
        assert!(batches[..n - 1].iter().all(|b| b.len == 7));
        assert!(batches[n - 1].len <= 7);
    }

    #[test]
    fn single_column() {
        let stream: Vec<usize> = (0..10).collect();
        let batches = lm_batches(&stream, 1, 4, None, &mut rng()).unwrap();
        let flat: Vec<usize> = batches.iter().flat_map(|b| b.inputs.clone()).collect();
        assert_eq!(flat, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn too_short_stream() {
        assert!(matches!(
            lm_batches(&[1, 2, 3], 2, 3, None, &mut rng()),
            Err(TextError::StreamTooShort { .. })
        ));
    }

    #[test]
    fn jittered_lengths_stay_in_range() {
        let stream: Vec<usize> = (0..20_000).collect();
        let batches = lm_batches(&stream, 4, 20, Some(LengthJitter::default()), &mut rng()).unwrap();
        let n = batches.len();
        assert!(batches[..n - 1].iter().all(|b| (5..=40).contains(&b.len)));
        assert!(batches.iter().any(|b| b.len != 20));
        for b in &batches {
            for t in 0..b.len - 1 {
                for c in 0..4 {
                    assert_eq!(b.target(t, c), b.input(t + 1, c));
                }
            }
        }
    }

    #[test]
    fn front_padding_layout() {
        let dc = DocChunks::from_docs(&[vec![5, 6, 7, 8, 9], vec![1, 2]], 3).unwrap();
        assert_eq!(dc.padded_len(), 6);
        assert_eq!(dc.chunks, vec![vec![0, 0, 5, 0, 6, 0], vec![7, 0, 8, 1, 9, 2]]);
        assert_eq!(dc.mask(0), vec![false, false, true, false, true, false]);
        assert_eq!(dc.mask(1), vec![true, false, true, true, true, true]);
    }

    #[test]
    fn exact_multiple_needs_no_padding() {
        let dc = DocChunks::from_docs(&[vec![4, 5, 6]], 3).unwrap();
        assert_eq!(dc.num_chunks(), 1);
        assert_eq!(dc.chunks[0], vec![4, 5, 6]);
        let doc: Vec<usize> = (10..22).collect();
        let dc = DocChunks::from_docs(std::slice::from_ref(&doc), 4).unwrap();
        assert_eq!(dc.num_chunks(), 3);
        assert_eq!(dc.chunks.concat(), doc);
    }

    #[test]
    fn minibatch_grouping() {
        let docs = vec![vec![1], vec![2, 3], vec![4, 5, 6]];
        let groups = bpt3c_chunks(&docs, 2, 2).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[1].reassemble(0), vec![4, 5, 6]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn chunks_reassemble_to_docs(
            docs in proptest::collection::vec(proptest::collection::vec(1usize..50, 1..30), 1..6),
            b in 1usize..8,
        ) {
            let dc = DocChunks::from_docs(&docs, b).unwrap();
            prop_assert_eq!(dc.padded_len() % b, 0);
            for (i, d) in docs.iter().enumerate() {
                prop_assert_eq!(&dc.reassemble(i), d);
            }
        }

        #[test]
        fn targets_are_inputs_shifted(len in 10usize..400, bsz in 1usize..5, bptt in 1usize..12) {
            prop_assume!(len >= bsz * 2);
            let stream: Vec<usize> = (0..len).collect();
            let batches = lm_batches(&stream, bsz, bptt, None, &mut rng()).unwrap();
            let col = len / bsz;
            for batch in &batches {
                for t in 0..batch.len {
                    for c in 0..bsz {
                        prop_assert_eq!(batch.target(t, c), batch.input(t, c) + 1);
                        prop_assert!(batch.input(t, c) / col == c || batch.input(t, c) < col * bsz);
                    }
                }
            }
        }
    }
}
