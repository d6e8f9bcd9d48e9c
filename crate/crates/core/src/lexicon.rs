//! Line-oriented resource files: the entity lexicon, diagnostic cue phrases,
//! the antonym table and the false-history templates.
//!
//! All files are UTF-8. Blank lines and lines starting with `#` are ignored.
//! Default copies ship inside the crate and are fully replaceable.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::normalize;

pub const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.tsv");
pub const DEFAULT_CUES: &str = include_str!("../data/cues.txt");
pub const DEFAULT_ANTONYMS: &str = include_str!("../data/antonyms.tsv");
pub const DEFAULT_ATTACK_HISTORIES: &str = include_str!("../data/attack_histories.txt");

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("{0}: resource is empty")]
    Empty(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Morphology,
    Diagnosis,
    Location,
    Marker,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Morphology,
        Category::Diagnosis,
        Category::Location,
        Category::Marker,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Morphology => "morphology",
            Category::Diagnosis => "diagnosis",
            Category::Location => "location",
            Category::Marker => "marker",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub term: String,
    pub category: Category,
}

/// Entity lexicon, kept sorted longest term first (ties by term) so a linear
/// scan yields the longest match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

fn read(path: &Path) -> Result<String, ResourceError> {
    std::fs::read_to_string(path).map_err(|source| ResourceError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl Lexicon {
    pub fn new(entries: impl IntoIterator<Item = LexiconEntry>) -> Result<Self, ResourceError> {
        let mut entries: Vec<LexiconEntry> = entries
            .into_iter()
            .map(|e| LexiconEntry {
                term: normalize(&e.term),
                category: e.category,
            })
            .filter(|e| !e.term.is_empty())
            .collect();
        if entries.is_empty() {
            return Err(ResourceError::Empty("lexicon".into()));
        }
        entries.sort_by(|a, b| {
            b.term
                .chars()
                .count()
                .cmp(&a.term.chars().count())
                .then_with(|| a.term.cmp(&b.term))
        });
        entries.dedup_by(|a, b| a.term == b.term);
        Ok(Self { entries })
    }

    /// Parses `term<TAB>category` lines.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ResourceError> {
        let mut entries = Vec::new();
        for (line, l) in content_lines(text) {
            let (term, cat) = l.split_once('\t').ok_or_else(|| ResourceError::Parse {
                file: origin.into(),
                line,
                msg: "expected term<TAB>category".into(),
            })?;
            let category = cat.parse().map_err(|msg| ResourceError::Parse {
                file: origin.into(),
                line,
                msg,
            })?;
            entries.push(LexiconEntry {
                term: term.to_owned(),
                category,
            });
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, ResourceError> {
        Self::parse(&read(path)?, &path.display().to_string())
    }

    pub fn default_pathology() -> Self {
        Self::parse(DEFAULT_LEXICON, "lexicon.tsv").expect("bundled lexicon parses")
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn category_of(&self, term: &str) -> Option<Category> {
        let t = normalize(term);
        self.entries.iter().find(|e| e.term == t).map(|e| e.category)
    }

    pub fn terms_in(&self, category: Category) -> impl Iterator<Item = &LexiconEntry> {
        self.entries.iter().filter(move |e| e.category == category)
    }

    /// Lexicon contents as TSV, in canonical (longest-first) order.
    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\n", e.term, e.category))
            .collect()
    }
}

/// Cue phrases that tie a diagnosis sentence back to earlier morphology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CueList {
    phrases: Vec<String>,
}

impl CueList {
    pub fn new(phrases: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut phrases: Vec<String> = phrases
            .into_iter()
            .map(|p| normalize(p.as_ref()))
            .filter(|p| !p.is_empty())
            .collect();
        phrases.sort();
        phrases.dedup();
        Self { phrases }
    }

    pub fn parse(text: &str) -> Self {
        Self::new(content_lines(text).map(|(_, l)| l))
    }

    pub fn load(path: &Path) -> Result<Self, ResourceError> {
        Ok(Self::parse(&read(path)?))
    }

    pub fn default_cues() -> Self {
        Self::parse(DEFAULT_CUES)
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    /// Whole-word, case-insensitive containment of any cue phrase.
    pub fn matches(&self, sentence: &str) -> bool {
        let padded = format!(" {} ", crate::text::words(sentence).join(" "));
        self.phrases.iter().any(|p| {
            let cue = format!(" {} ", crate::text::words(p).join(" "));
            padded.contains(&cue)
        })
    }
}

/// Symmetric table of polar terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AntonymTable {
    pairs: Vec<(String, String)>,
}

impl AntonymTable {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        let pairs = pairs
            .into_iter()
            .map(|(a, b)| (normalize(&a), normalize(&b)))
            .filter(|(a, b)| !a.is_empty() && !b.is_empty() && a != b)
            .collect();
        Self { pairs }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, ResourceError> {
        let mut pairs = Vec::new();
        for (line, l) in content_lines(text) {
            let (a, b) = l.split_once('\t').ok_or_else(|| ResourceError::Parse {
                file: origin.into(),
                line,
                msg: "expected term<TAB>antonym".into(),
            })?;
            pairs.push((a.to_owned(), b.to_owned()));
        }
        if pairs.is_empty() {
            return Err(ResourceError::Empty(origin.into()));
        }
        Ok(Self::new(pairs))
    }

    pub fn load(path: &Path) -> Result<Self, ResourceError> {
        Self::parse(&read(path)?, &path.display().to_string())
    }

    pub fn default_table() -> Self {
        Self::parse(DEFAULT_ANTONYMS, "antonyms.tsv").expect("bundled antonym table parses")
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Both directions of every pair.
    pub fn polar_terms(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs
            .iter()
            .flat_map(|(a, b)| [(a.as_str(), b.as_str()), (b.as_str(), a.as_str())])
    }

    pub fn antonym_of(&self, term: &str) -> Option<&str> {
        let t = normalize(term);
        self.polar_terms().find(|(a, _)| *a == t).map(|(_, b)| b)
    }
}

/// False clinical histories used by the semantic attack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackTemplates {
    histories: Vec<String>,
}

impl AttackTemplates {
    pub fn new(histories: impl IntoIterator<Item = impl Into<String>>) -> Result<Self, ResourceError> {
        let histories: Vec<String> = histories
            .into_iter()
            .map(Into::into)
            .map(|h: String| h.trim().to_owned())
            .filter(|h| !h.is_empty())
            .collect();
        if histories.is_empty() {
            return Err(ResourceError::Empty("attack templates".into()));
        }
        Ok(Self { histories })
    }

    pub fn parse(text: &str) -> Result<Self, ResourceError> {
        Self::new(content_lines(text).map(|(_, l)| l.to_owned()))
    }

    pub fn load(path: &Path) -> Result<Self, ResourceError> {
        Self::parse(&read(path)?)
    }

    pub fn default_templates() -> Self {
        Self::parse(DEFAULT_ATTACK_HISTORIES).expect("bundled templates parse")
    }

    pub fn histories(&self) -> &[String] {
        &self.histories
    }

    /// Index chosen by [`crate::hashing::stable_index`] of the case id.
    pub fn index_for(&self, case_id: &str) -> usize {
        crate::hashing::stable_index(case_id, self.histories.len())
    }

    pub fn select(&self, case_id: &str) -> &str {
        &self.histories[self.index_for(case_id)]
    }
}

/// The four resource files a case evaluation reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Resources {
    pub lexicon: Lexicon,
    pub cues: CueList,
    pub antonyms: AntonymTable,
    pub attack_templates: AttackTemplates,
}

impl Resources {
    pub fn bundled() -> Self {
        Self {
            lexicon: Lexicon::default_pathology(),
            cues: CueList::default_cues(),
            antonyms: AntonymTable::default_table(),
            attack_templates: AttackTemplates::default_templates(),
        }
    }

    /// sha256 over a canonical rendering of all four resources.
    pub fn digest(&self) -> String {
        let mut canon = String::new();
        canon.push_str(&self.lexicon.to_tsv());
        canon.push('\u{1e}');
        for c in self.cues.phrases() {
            canon.push_str(c);
            canon.push('\n');
        }
        canon.push('\u{1e}');
        for (a, b) in self.antonyms.pairs() {
            canon.push_str(&format!("{a}\t{b}\n"));
        }
        canon.push('\u{1e}');
        for h in self.attack_templates.histories() {
            canon.push_str(h);
            canon.push('\n');
        }
        crate::hashing::sha256_hex(canon.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_resources_parse() {
        let lex = Lexicon::default_pathology();
        assert!(lex.len() >= 200, "{}", lex.len());
        for c in [
            Category::Morphology,
            Category::Diagnosis,
            Category::Location,
            Category::Marker,
        ] {
            assert!(lex.terms_in(c).count() >= 20, "{c}");
        }
        assert_eq!(CueList::default_cues().phrases().len(), 4);
        assert_eq!(AttackTemplates::default_templates().histories().len(), 10);
        assert!(AntonymTable::default_table().pairs().len() >= 5);
    }

    #[test]
    fn lexicon_sorted_longest_first() {
        let lex = Lexicon::parse("cells\tmorphology\nlarge cells\tmorphology\n", "t").unwrap();
        assert_eq!(lex.entries()[0].term, "large cells");
        let lens: Vec<usize> = Lexicon::default_pathology()
            .entries()
            .iter()
            .map(|e| e.term.chars().count())
            .collect();
        assert!(lens.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn default_lexicon_has_no_polar_words() {
        // Logic-error edits must never touch an entity.
        let lex = Lexicon::default_pathology();
        let table = AntonymTable::default_table();
        for e in lex.entries() {
            let ws = crate::text::words(&e.term);
            for (p, _) in table.polar_terms() {
                assert!(!ws.iter().any(|w| w == p), "{} contains {p}", e.term);
            }
        }
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            Lexicon::parse("tumor morphology\n", "x"),
            Err(ResourceError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Lexicon::parse("tumor\tshape\n", "x"),
            Err(ResourceError::Parse { .. })
        ));
        assert!(matches!(Lexicon::parse("# only\n", "x"), Err(ResourceError::Empty(_))));
        assert!(AttackTemplates::parse("\n\n").is_err());
    }

    #[test]
    fn cue_matching_is_word_bounded() {
        let cues = CueList::default_cues();
        assert!(cues.matches("Findings Consistent  with lymphoma"));
        assert!(!cues.matches("inconsistent withdrawal"));
    }

    #[test]
    fn antonyms_are_symmetric() {
        let t = AntonymTable::default_table();
        assert_eq!(t.antonym_of("Malignant"), Some("benign"));
        assert_eq!(t.antonym_of("benign"), Some("malignant"));
        assert_eq!(t.antonym_of("tumor"), None);
    }
}
