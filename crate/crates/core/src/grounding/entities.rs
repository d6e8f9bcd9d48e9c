//! Lexicon-driven clinical entity extraction.

use serde::{Deserialize, Serialize};

use crate::lexicon::{Category, Lexicon};

/// One lexicon match in a report. `span` is a half-open range of character
/// (not byte) offsets into the original text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalEntity {
    pub surface: String,
    pub term: String,
    pub category: Category,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalEntityList {
    pub entities: Vec<ClinicalEntity>,
}

impl ClinicalEntityList {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ClinicalEntity> {
        self.entities.iter()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn chars_equal_folded(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

/// Length in chars of the match of `term` at `text[start..]`, if any. A space
/// in the term matches any non-empty run of whitespace; the match must end on
/// a word boundary.
fn match_at(text: &[char], start: usize, term: &str) -> Option<usize> {
    let mut i = start;
    for tc in term.chars() {
        if tc == ' ' {
            let run_start = i;
            while i < text.len() && text[i].is_whitespace() {
                i += 1;
            }
            if i == run_start {
                return None;
            }
            continue;
        }
        if i >= text.len() || !chars_equal_folded(text[i], tc) {
            return None;
        }
        i += 1;
    }
    if i < text.len() && is_word_char(text[i]) && text[i - 1].is_alphanumeric() {
        return None;
    }
    Some(i - start)
}

/// Case-insensitive, word-bounded, leftmost-longest scan of `report` for
/// lexicon terms. Matches never overlap; each occurrence is its own entity.
pub fn extract_entities(report: &str, lexicon: &Lexicon) -> ClinicalEntityList {
    let text: Vec<char> = report.chars().collect();
    let mut entities = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let at_word_start = is_word_char(text[pos]) && (pos == 0 || !is_word_char(text[pos - 1]));
        if !at_word_start {
            pos += 1;
            continue;
        }
        // the lexicon is sorted longest-first, so the first hit is the longest
        let hit = lexicon.entries().iter().find_map(|e| {
            let first = e.term.chars().next()?;
            if !chars_equal_folded(text[pos], first) {
                return None;
            }
            match_at(&text, pos, &e.term).map(|len| (e, len))
        });
        match hit {
            Some((entry, len)) => {
                entities.push(ClinicalEntity {
                    surface: text[pos..pos + len].iter().collect(),
                    term: entry.term.clone(),
                    category: entry.category,
                    span: (pos, pos + len),
                });
                pos += len;
            }
            None => pos += 1,
        }
    }
    ClinicalEntityList { entities }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::LexiconEntry;

    fn lex(entries: &[(&str, Category)]) -> Lexicon {
        Lexicon::new(entries.iter().map(|(t, c)| LexiconEntry {
            term: (*t).to_owned(),
            category: *c,
        }))
        .unwrap()
    }

    #[test]
    fn text_order_and_categories() {
        let l = lex(&[
            ("atypical cells", Category::Morphology),
            ("lymphoma", Category::Diagnosis),
        ]);
        let out = extract_entities("Sheets of atypical cells consistent with lymphoma.", &l);
        let got: Vec<_> = out.iter().map(|e| (e.surface.as_str(), e.category, e.span)).collect();
        assert_eq!(
            got,
            vec![
                ("atypical cells", Category::Morphology, (10, 24)),
                ("lymphoma", Category::Diagnosis, (41, 49)),
            ]
        );
    }

    #[test]
    fn longest_match_wins() {
        let l = lex(&[("cells", Category::Morphology), ("large cells", Category::Morphology)]);
        let out = extract_entities("large cells", &l);
        assert_eq!(out.len(), 1);
        assert_eq!(out.entities[0].term, "large cells");
        let out = extract_entities("Small cells and LARGE\n  cells.", &l);
        let terms: Vec<_> = out.iter().map(|e| e.term.as_str()).collect();
        assert_eq!(terms, ["cells", "large cells"]);
        assert_eq!(out.entities[1].surface, "LARGE\n  cells");
    }

    #[test]
    fn word_boundaries_and_empty() {
        let l = lex(&[("node", Category::Location), ("ki-67", Category::Marker)]);
        assert!(extract_entities("nodes and anode", &l).is_empty());
        assert!(extract_entities("", &l).is_empty());
        assert!(extract_entities("no terms here", &l).is_empty());
        let out = extract_entities("Ki-67 high; node.", &l);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn char_offsets_for_non_ascii() {
        let l = lex(&[("tumor", Category::Diagnosis)]);
        let out = extract_entities("Ünïcode tumor", &l);
        assert_eq!(out.entities[0].span, (8, 13));
    }

    #[test]
    fn every_occurrence_counts() {
        let l = Lexicon::default_pathology();
        let out = extract_entities("Lymphoma. Lymphoma again.", &l);
        assert_eq!(out.iter().filter(|e| e.term == "lymphoma").count(), 2);
    }
}
