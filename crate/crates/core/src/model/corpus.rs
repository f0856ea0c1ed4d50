use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Token id reserved for masked positions.
pub const MASK_TOKEN: usize = 0;
/// Opener `1 + i` is always closed by `1 + NUM_SENTINEL_PAIRS + i`.
pub const NUM_SENTINEL_PAIRS: usize = 4;
const FIRST_CONTENT: usize = 1 + 2 * NUM_SENTINEL_PAIRS;
/// Probability that a content token is followed by its template successor.
pub const BIGRAM_FOLLOW: f64 = 0.7;

/// Synthetic token sequences with local bigram structure and long-range
/// matched sentinel pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: usize,
    pub seq_len: usize,
    pub train: Vec<Vec<usize>>,
    pub heldout: Vec<Vec<usize>>,
    /// Template successor of each content token (`successor[t]` for `t ≥ first_content`).
    pub successor: Vec<usize>,
}

impl Corpus {
    pub fn first_content_token(&self) -> usize {
        FIRST_CONTENT
    }

    pub fn is_opener(t: usize) -> bool {
        (1..=NUM_SENTINEL_PAIRS).contains(&t)
    }

    pub fn closer_of(opener: usize) -> usize {
        opener + NUM_SENTINEL_PAIRS
    }

    pub fn is_closer(t: usize) -> bool {
        (1 + NUM_SENTINEL_PAIRS..FIRST_CONTENT).contains(&t)
    }
}

/// `size` sequences of length `seq_len`; the last eighth (at least one) is heldout.
pub fn synth_corpus(seed: u64, size: usize, vocab: usize, seq_len: usize) -> Corpus {
    assert!(vocab >= 16, "vocab must be at least 16");
    assert!(seq_len >= 8, "sequences must have at least 8 tokens");
    assert!(size >= 2, "need at least one train and one heldout sequence");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content: Vec<usize> = (FIRST_CONTENT..vocab).collect();
    let mut shuffled = content.clone();
    shuffled.shuffle(&mut rng);
    let mut successor = vec![0; vocab];
    for (&from, &to) in content.iter().zip(&shuffled) {
        successor[from] = to;
    }

    let mut seqs = Vec::with_capacity(size);
    for _ in 0..size {
        let mut seq = Vec::with_capacity(seq_len);
        let mut prev = content[rng.random_range(0..content.len())];
        seq.push(prev);
        for _ in 1..seq_len {
            prev = if rng.random_bool(BIGRAM_FOLLOW) {
                successor[prev]
            } else {
                content[rng.random_range(0..content.len())]
            };
            seq.push(prev);
        }
        let opener = 1 + rng.random_range(0..NUM_SENTINEL_PAIRS);
        let open_at = rng.random_range(0..seq_len / 4);
        let close_at = rng.random_range(3 * seq_len / 4..seq_len);
        seq[open_at] = opener;
        seq[close_at] = Corpus::closer_of(opener);
        seqs.push(seq);
    }
    let heldout_len = (size / 8).max(1);
    let heldout = seqs.split_off(size - heldout_len);
    Corpus {
        vocab,
        seq_len,
        train: seqs,
        heldout,
        successor,
    }
}
