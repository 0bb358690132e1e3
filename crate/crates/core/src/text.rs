//! The single tokenizer shared by indexing, query parsing and answer matching.

use unicode_normalization::UnicodeNormalization;

/// NFKC-normalizes, lowercases and splits on every run of non-alphanumeric
/// characters. Empty tokens never appear in the output.
pub fn normalize_text(raw: &str) -> Vec<String> {
    let folded: String = raw.nfkc().flat_map(char::to_lowercase).collect();
    folded
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Joins tokens with single spaces.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_dashes_and_punctuation() {
        assert_eq!(
            normalize_text("North Korea–South Korea relations"),
            ["north", "korea", "south", "korea", "relations"]
        );
        assert_eq!(normalize_text("1945."), ["1945"]);
        assert!(normalize_text("").is_empty());
        assert!(normalize_text(" -- ... ").is_empty());
    }

    #[test]
    fn compatibility_forms_fold() {
        // fullwidth digits and the "fi" ligature
        assert_eq!(normalize_text("１９４５ ﬁre"), ["1945", "fire"]);
        assert_eq!(normalize_text("Who's"), ["who", "s"]);
    }

    #[test]
    fn idempotent_on_own_output() {
        let toks = normalize_text("C. S. Lewis' best-known WORK (1950)");
        assert_eq!(normalize_text(&join_tokens(&toks)), toks);
    }
}
