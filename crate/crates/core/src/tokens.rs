//! Token estimation shared by every component that enforces a token budget.

/// Approximate token count: one token per four characters, rounded up.
pub fn estimate(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Character budget equivalent to `tokens` estimated tokens.
pub fn char_budget(tokens: usize) -> usize {
    tokens * 4
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_up() {
        assert_eq!(estimate(""), 0);
        assert_eq!(estimate("abc"), 1);
        assert_eq!(estimate("abcd"), 1);
        assert_eq!(estimate("abcde"), 2);
    }

    #[test]
    fn counts_chars_not_bytes() {
        assert_eq!(estimate("ééééé"), 2);
    }
}
