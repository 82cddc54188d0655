//! Term canonicalization shared by ingestion and the embedding store.

/// Matching key for a MedDRA term: trimmed, inner whitespace collapsed to a
/// single space, lower-cased. Display strings keep their original casing.
pub fn canonical_key(term: &str) -> String {
    let mut out = String::with_capacity(term.len());
    for word in term.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Display form: trimmed with inner whitespace collapsed, casing preserved.
pub fn display_form(term: &str) -> String {
    term.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `NCT` followed by exactly eight digits.
pub fn is_nct_id(id: &str) -> bool {
    let Some(digits) = id.strip_prefix("NCT") else {
        return false;
    };
    digits.len() == 8 && digits.bytes().all(|b| b.is_ascii_digit())
}
