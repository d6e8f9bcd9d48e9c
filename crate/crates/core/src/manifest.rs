//! JSON Lines inputs: the case manifest and the perturbed-caption corpus.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiments::{Edit, PerturbedTriple};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate case id {0}")]
    DuplicateId(String),
    #[error("{0} has no entries")]
    Empty(&'static str),
    #[error("decoding image {path}: {msg}")]
    Image { path: String, msg: String },
}

fn read(path: &Path) -> Result<String, ManifestError> {
    std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_lines<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, ManifestError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ManifestError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<(), ManifestError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if id.trim().is_empty() {
            return Err(ManifestError::Parse {
                line: 0,
                msg: "empty case_id".into(),
            });
        }
        if !seen.insert(id) {
            return Err(ManifestError::DuplicateId(id.to_owned()));
        }
    }
    Ok(())
}

fn resolve(base: Option<&Path>, p: &mut PathBuf) {
    if let Some(b) = base {
        if p.is_relative() {
            *p = b.join(&*p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub case_id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<String>,
}

/// One JSON object per line: `{"case_id", "image", "report"?, "cohort"?}`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CaseManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CaseManifest {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let entries: Vec<ManifestEntry> = parse_lines(text)?;
        if entries.is_empty() {
            return Err(ManifestError::Empty("manifest"));
        }
        check_unique(entries.iter().map(|e| e.case_id.as_str()))?;
        Ok(Self { entries })
    }

    /// Parses `path`; relative image paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let mut m = Self::parse(&read(path)?)?;
        for e in &mut m.entries {
            resolve(path.parent(), &mut e.image);
        }
        Ok(m)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }
}

/// A perturbed-corpus line: a triple plus the image its captions describe.
/// Missing variants default to the control caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub case_id: String,
    pub image: PathBuf,
    pub control: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_hallucination: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logic_error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<Edit>,
}

impl CorpusEntry {
    pub fn from_triple(case_id: &str, image: PathBuf, t: &PerturbedTriple) -> Self {
        Self {
            case_id: case_id.to_owned(),
            image,
            control: t.control.clone(),
            visual_hallucination: Some(t.visual_hallucination.clone()),
            logic_error: Some(t.logic_error.clone()),
            provenance: t.provenance.clone(),
        }
    }

    pub fn triple(&self) -> PerturbedTriple {
        PerturbedTriple {
            control: self.control.clone(),
            visual_hallucination: self
                .visual_hallucination
                .clone()
                .unwrap_or_else(|| self.control.clone()),
            logic_error: self.logic_error.clone().unwrap_or_else(|| self.control.clone()),
            provenance: self.provenance.clone(),
        }
    }
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusEntry>, ManifestError> {
    let entries: Vec<CorpusEntry> = parse_lines(text)?;
    if entries.is_empty() {
        return Err(ManifestError::Empty("corpus"));
    }
    check_unique(entries.iter().map(|e| e.case_id.as_str()))?;
    Ok(entries)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusEntry>, ManifestError> {
    let mut entries = parse_corpus(&read(path)?)?;
    for e in &mut entries {
        resolve(path.parent(), &mut e.image);
    }
    Ok(entries)
}

/// Decodes a PNG or JPEG file to 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage, ManifestError> {
    let img = image::open(path).map_err(|e| ManifestError::Image {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}
