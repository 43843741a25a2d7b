//! Answer normalization for the built-in judge.
//!
//! Follows the extractive-QA convention: lowercase, strip ASCII punctuation,
//! drop the articles "a", "an", "the", collapse whitespace.

const ARTICLES: [&str; 3] = ["a", "an", "the"];

pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped
        .split_whitespace()
        .filter(|tok| !ARTICLES.contains(tok))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalized whitespace tokens of `text`.
pub fn answer_tokens(text: &str) -> Vec<String> {
    normalize_answer(text)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        assert_eq!(normalize_answer("The Eiffel  Tower."), "eiffel tower");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("150k"), "150k");
    }

    #[test]
    fn articles_only_removed_as_whole_tokens() {
        assert_eq!(normalize_answer("Theater an Anthem"), "theater anthem");
        assert_eq!(normalize_answer("  A  "), "");
    }

    proptest! {
        #[test]
        fn idempotent(s in ".{0,64}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn idempotent_on_ascii_sentences(s in "[A-Za-z .,!?'-]{0,64}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }
    }
}
