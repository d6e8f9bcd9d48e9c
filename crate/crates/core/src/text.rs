//! Text normalization, tokenization and sentence splitting.

use unicode_normalization::UnicodeNormalization;

/// NFC, lowercase, whitespace runs collapsed to one space, trimmed.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let lower = nfc.to_lowercase();
    lower.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercased alphanumeric word tokens.
pub fn words(text: &str) -> Vec<String> {
    normalize(text)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Abbreviations whose trailing period does not end a sentence.
pub const ABBREVIATIONS: &[&str] = &["e.g.", "i.e.", "cf.", "approx.", "vs.", "etc."];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub index: usize,
    pub text: String,
    /// Character offset of `text` in the source.
    pub start: usize,
}

/// Splits on `.`, `;`, `!`, `?` and newlines. Periods inside numbers
/// (`2.5`) and after an entry of [`ABBREVIATIONS`] do not split.
pub fn split_sentences(text: &str) -> Vec<Sentence> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut seg_start = 0usize;
    let mut i = 0usize;

    let flush = |from: usize, to: usize, out: &mut Vec<Sentence>| {
        let seg: String = chars[from..to].iter().collect();
        let lead = seg.chars().take_while(|c| c.is_whitespace()).count();
        let trimmed = seg.trim();
        if !trimmed.is_empty() {
            out.push(Sentence {
                index: out.len(),
                text: trimmed.to_owned(),
                start: from + lead,
            });
        }
    };

    while i < chars.len() {
        let c = chars[i];
        let boundary = match c {
            '\n' | ';' | '!' | '?' => true,
            '.' => {
                let digit_before = i > 0 && chars[i - 1].is_ascii_digit();
                let digit_after = chars.get(i + 1).is_some_and(|d| d.is_ascii_digit());
                !(digit_before && digit_after) && !ends_abbreviation(&chars, i)
            }
            _ => false,
        };
        if boundary {
            flush(seg_start, i, &mut out);
            seg_start = i + 1;
        }
        i += 1;
    }
    flush(seg_start, chars.len(), &mut out);
    out
}

/// True when the whitespace-delimited token holding `chars[dot]` is a guarded abbreviation.
fn ends_abbreviation(chars: &[char], dot: usize) -> bool {
    let mut lo = dot;
    while lo > 0 && !chars[lo - 1].is_whitespace() {
        lo -= 1;
    }
    let mut hi = dot + 1;
    while hi < chars.len() && !chars[hi].is_whitespace() {
        hi += 1;
    }
    let token: String = chars[lo..hi].iter().collect::<String>().to_lowercase();
    let token = token
        .trim_start_matches(['(', '['])
        .trim_end_matches([',', ':', ')', ']']);
    ABBREVIATIONS.contains(&token)
}

/// Capitalizes the first character of `replacement` when `original` starts uppercase.
pub fn match_case(original: &str, replacement: &str) -> String {
    let upper = original.chars().next().is_some_and(char::is_uppercase);
    if !upper {
        return replacement.to_owned();
    }
    let mut cs = replacement.chars();
    match cs.next() {
        Some(f) => f.to_uppercase().chain(cs).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize("Tumor "), "tumor");
        assert_eq!(normalize("  Atypical\t\tCELLS\n"), "atypical cells");
        // decomposed e + combining acute -> NFC é
        assert_eq!(normalize("Ne\u{301}crosis"), "n\u{e9}crosis");
    }

    #[test]
    fn sentences_basic() {
        let s = split_sentences("Atypical cells in lymph node. Consistent with lymphoma.");
        let texts: Vec<_> = s.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["Atypical cells in lymph node", "Consistent with lymphoma"]);
        assert_eq!(s[1].start, 30);
        assert_eq!(s[1].index, 1);
    }

    #[test]
    fn sentences_guards() {
        let s = split_sentences("Ki67 about 2.5 percent, e.g. rare; mitoses absent\nNo necrosis");
        let texts: Vec<_> = s.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(
            texts,
            ["Ki67 about 2.5 percent, e.g. rare", "mitoses absent", "No necrosis"]
        );
    }

    #[test]
    fn empty_and_punctuation_only() {
        assert!(split_sentences("").is_empty());
        assert!(split_sentences(" . ; \n").is_empty());
    }

    #[test]
    fn case_matching() {
        assert_eq!(match_case("Lymphoma", "melanoma"), "Melanoma");
        assert_eq!(match_case("lymphoma", "melanoma"), "melanoma");
    }
}
