/// Counts tokens for budget checks. Swap in a real tokenizer for exact counts.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// The default estimate: one token per four bytes, rounded up.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteEstimator;

impl TokenCounter for ByteEstimator {
    fn count(&self, text: &str) -> usize {
        estimate_tokens(text)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}
