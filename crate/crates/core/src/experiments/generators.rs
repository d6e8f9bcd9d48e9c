//! Caption edits that build the Control / Visual Hallucination / Logic Error
//! groups, with recorded provenance.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::grounding::extract_entities;
use crate::lexicon::{AntonymTable, Lexicon, LexiconEntry};
use crate::rng::SeededRng;
use crate::text::match_case;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    VisualHallucination,
    LogicError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOperation {
    ReplaceEntity,
    FlipPolarity,
}

/// One substitution. `span` is in characters of the control caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub variant: Variant,
    pub operation: EditOperation,
    pub span: (usize, usize),
    pub original: String,
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedTriple {
    pub control: String,
    pub visual_hallucination: String,
    pub logic_error: String,
    pub provenance: Vec<Edit>,
}

fn splice(text: &str, span: (usize, usize), replacement: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out: String = chars[..span.0].iter().collect();
    out.push_str(replacement);
    out.extend(&chars[span.1..]);
    out
}

/// Replaces one seeded-random caption entity with a seeded-random pool term of
/// the same category. Only entities with at least one eligible pool term (same
/// category, not already in the caption) are candidates.
pub fn make_visual_hallucination(
    caption: &str,
    entity_pool: &[LexiconEntry],
    lexicon: &Lexicon,
    seed: u64,
) -> Result<(String, Edit), ExperimentError> {
    let entities = extract_entities(caption, lexicon);
    if entities.is_empty() {
        return Err(ExperimentError::NoEntityToReplace);
    }
    let present: BTreeSet<&str> = entities.iter().map(|e| e.term.as_str()).collect();
    let options_for = |i: usize| -> Vec<&LexiconEntry> {
        let cat = entities.entities[i].category;
        entity_pool
            .iter()
            .filter(|p| p.category == cat && !present.contains(p.term.as_str()))
            .collect()
    };
    let candidates: Vec<usize> = (0..entities.len()).filter(|&i| !options_for(i).is_empty()).collect();
    if candidates.is_empty() {
        return Err(ExperimentError::NoReplacement);
    }
    let mut rng = SeededRng::new(seed);
    let target = candidates[rng.index(candidates.len())];
    let options = options_for(target);
    let pick = options[rng.index(options.len())];
    let e = &entities.entities[target];
    let replacement = match_case(&e.surface, &pick.term);
    let edit = Edit {
        variant: Variant::VisualHallucination,
        operation: EditOperation::ReplaceEntity,
        span: e.span,
        original: e.surface.clone(),
        replacement: replacement.clone(),
    };
    Ok((splice(caption, e.span, &replacement), edit))
}

/// Flips one seeded-random polar word (either side of an antonym pair) to its
/// antonym.
pub fn make_logic_error(caption: &str, antonyms: &AntonymTable, seed: u64) -> Result<(String, Edit), ExperimentError> {
    let chars: Vec<char> = caption.chars().collect();
    let mut hits: Vec<(usize, usize, String)> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_alphanumeric() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_alphanumeric() {
            i += 1;
        }
        let word: String = chars[start..i].iter().collect::<String>().to_lowercase();
        if let Some(flip) = antonyms.antonym_of(&word) {
            hits.push((start, i, flip.to_owned()));
        }
    }
    if hits.is_empty() {
        return Err(ExperimentError::NoPolarTerm);
    }
    let mut rng = SeededRng::new(seed);
    let (s, e, flip) = &hits[rng.index(hits.len())];
    let original: String = chars[*s..*e].iter().collect();
    let replacement = match_case(&original, flip);
    let edit = Edit {
        variant: Variant::LogicError,
        operation: EditOperation::FlipPolarity,
        span: (*s, *e),
        original,
        replacement: replacement.clone(),
    };
    Ok((splice(caption, (*s, *e), &replacement), edit))
}

/// Both perturbed variants of `caption`, seeded independently from `seed`.
pub fn make_triple(
    caption: &str,
    entity_pool: &[LexiconEntry],
    lexicon: &Lexicon,
    antonyms: &AntonymTable,
    seed: u64,
) -> Result<PerturbedTriple, ExperimentError> {
    let (vh, vh_edit) = make_visual_hallucination(caption, entity_pool, lexicon, seed)?;
    let (le, le_edit) = make_logic_error(caption, antonyms, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    Ok(PerturbedTriple {
        control: caption.to_owned(),
        visual_hallucination: vh,
        logic_error: le,
        provenance: vec![vh_edit, le_edit],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Category;

    fn pool(terms: &[(&str, Category)]) -> Vec<LexiconEntry> {
        terms
            .iter()
            .map(|(t, c)| LexiconEntry {
                term: (*t).into(),
                category: *c,
            })
            .collect()
    }

    #[test]
    fn replaces_same_category() {
        let lex = Lexicon::default_pathology();
        let p = pool(&[("melanoma", Category::Diagnosis)]);
        let (out, edit) = make_visual_hallucination("Findings consistent with lymphoma.", &p, &lex, 1).unwrap();
        assert_eq!(out, "Findings consistent with melanoma.");
        assert_eq!(edit.original, "lymphoma");
        assert_eq!(edit.span, (25, 33));
        assert_eq!(
            make_visual_hallucination("Findings consistent with lymphoma.", &p, &lex, 1)
                .unwrap()
                .0,
            out
        );
        assert!(matches!(
            make_visual_hallucination("Nothing here.", &p, &lex, 1),
            Err(ExperimentError::NoEntityToReplace)
        ));
    }

    #[test]
    fn flips_polarity() {
        let t = AntonymTable::default_table();
        assert_eq!(
            make_logic_error("consistent with a malignant neoplasm", &t, 3)
                .unwrap()
                .0,
            "consistent with a benign neoplasm"
        );
        assert_eq!(make_logic_error("mitoses present", &t, 3).unwrap().0, "mitoses absent");
        assert_eq!(make_logic_error("Benign.", &t, 3).unwrap().0, "Malignant.");
        assert!(matches!(
            make_logic_error("no polar words", &t, 3),
            Err(ExperimentError::NoPolarTerm)
        ));
    }

    #[test]
    fn triple_differs_from_control() {
        let lex = Lexicon::default_pathology();
        let p = pool(&[("melanoma", Category::Diagnosis)]);
        let t = make_triple(
            "Malignant cells; consistent with lymphoma.",
            &p,
            &lex,
            &AntonymTable::default_table(),
            5,
        )
        .unwrap();
        assert_ne!(t.visual_hallucination, t.control);
        assert_ne!(t.logic_error, t.control);
        assert_eq!(t.provenance.len(), 2);
    }
}
