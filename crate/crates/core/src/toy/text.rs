use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::seed;

/// Token embeddings for a prompt: `[BOS, words..., EOS, PAD...]`.
///
/// Each distinct word maps to a fixed vector drawn from a stream keyed by
/// `(seed, lowercase word)`, so repeated words share an embedding. Prompts
/// longer than `tokens - 2` words are truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEmbedding {
    pub tokens: Array2<f64>,
    /// Indices of the word tokens (excludes BOS, EOS and padding).
    pub prompt_tokens: Vec<usize>,
}

fn vector(seed: u64, key: &str, dim: usize) -> Vec<f64> {
    let mut rng = seed::stream(seed, &format!("toy-token:{key}"), 0);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

impl ToyTextEmbedding {
    pub fn encode(prompt: &str, seed: u64, tokens: usize, dim: usize) -> Self {
        assert!(tokens >= 2, "need room for BOS and EOS");
        let words: Vec<String> = prompt
            .split_whitespace()
            .take(tokens - 2)
            .map(|w| w.to_lowercase())
            .collect();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(tokens);
        rows.push(vector(seed, "<bos>", dim));
        for w in &words {
            rows.push(vector(seed, &format!("w:{w}"), dim));
        }
        rows.push(vector(seed, "<eos>", dim));
        let pad = vector(seed, "<pad>", dim);
        while rows.len() < tokens {
            rows.push(pad.clone());
        }
        let tokens_m = Array2::from_shape_fn((tokens, dim), |(i, j)| rows[i][j]);
        Self {
            tokens: tokens_m,
            prompt_tokens: (1..=words.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}
