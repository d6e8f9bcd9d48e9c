//! Visual grounding: each report entity is matched to its best patch and the
//! per-entity maxima are mean-pooled.

mod entities;

pub use entities::{extract_entities, ClinicalEntity, ClinicalEntityList};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{Category, Lexicon};
use crate::providers::{ImageEmbedder, ProviderError, TextEmbedder};
use crate::scalar::{dot, Scalar};
use crate::tessellate::PatchBag;

/// Score reported for a report with no extractable entities.
pub const UNGROUNDABLE_SCORE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("no entities to ground")]
    EmptyEntities,
    #[error("no patches to ground against")]
    EmptyPatches,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Row-major M×N matrix of entity/patch cosines.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self, GroundingError> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(GroundingError::DimensionMismatch {
                    expected: n,
                    got: r.len(),
                });
            }
            data.extend(r);
        }
        Ok(Self { rows: m, cols: n, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, entity: usize, patch: usize) -> T {
        self.data[entity * self.cols + patch]
    }

    pub fn row(&self, entity: usize) -> &[T] {
        &self.data[entity * self.cols..(entity + 1) * self.cols]
    }
}

/// `sim[j][i] = v_iᵀ t_j`, clamped to `[−1, 1]` against rounding.
pub fn similarity_matrix<T: Scalar, A: AsRef<[T]>, B: AsRef<[T]>>(
    text_embs: &[A],
    patch_embs: &[B],
) -> Result<SimilarityMatrix<T>, GroundingError> {
    let dim = text_embs
        .first()
        .map(|t| t.as_ref().len())
        .or_else(|| patch_embs.first().map(|p| p.as_ref().len()))
        .unwrap_or(0);
    for v in text_embs
        .iter()
        .map(AsRef::as_ref)
        .chain(patch_embs.iter().map(AsRef::as_ref))
    {
        if v.len() != dim {
            return Err(GroundingError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }
    let mut data = Vec::with_capacity(text_embs.len() * patch_embs.len());
    for t in text_embs {
        for v in patch_embs {
            data.push(dot(v.as_ref(), t.as_ref()).clamp_to(-T::one(), T::one()));
        }
    }
    Ok(SimilarityMatrix {
        rows: text_embs.len(),
        cols: patch_embs.len(),
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchMatch<T> {
    pub patch_index: usize,
    pub raw_cosine: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult<T> {
    /// Remapped score `(raw_mean + 1) / 2` in `[0, 1]`.
    pub score: T,
    /// Mean of the per-entity maximum cosines, in `[−1, 1]`.
    pub raw_mean: T,
    /// Best patch per entity, in entity order.
    pub matches: Vec<PatchMatch<T>>,
}

/// Spatial argmax per entity (ties go to the lowest patch index) followed by
/// mean pooling in entity order.
pub fn grounding_score<T: Scalar>(sim: &SimilarityMatrix<T>) -> Result<GroundingResult<T>, GroundingError> {
    if sim.rows == 0 {
        return Err(GroundingError::EmptyEntities);
    }
    if sim.cols == 0 {
        return Err(GroundingError::EmptyPatches);
    }
    let matches: Vec<PatchMatch<T>> = (0..sim.rows)
        .map(|j| {
            let row = sim.row(j);
            let mut best = PatchMatch {
                patch_index: 0,
                raw_cosine: row[0],
            };
            for (i, &c) in row.iter().enumerate().skip(1) {
                if c > best.raw_cosine {
                    best = PatchMatch {
                        patch_index: i,
                        raw_cosine: c,
                    };
                }
            }
            best
        })
        .collect();
    let mut total = T::zero();
    for m in &matches {
        total += m.raw_cosine;
    }
    let raw_mean = total / T::from_count(matches.len());
    let score = ((raw_mean + T::one()) / T::lit(2.0)).clamp_to(T::zero(), T::one());
    Ok(GroundingResult {
        score,
        raw_mean,
        matches,
    })
}

/// Per-entity audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityEvidence {
    pub surface: String,
    pub term: String,
    pub category: Category,
    pub span: (usize, usize),
    pub best_patch_index: usize,
    pub best_patch_xy: (u32, u32),
    pub raw_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub score: f64,
    /// `None` when the report had no entities.
    pub raw_mean: Option<f64>,
    pub ungroundable: bool,
    pub patch_count: usize,
    pub evidence: Vec<EntityEvidence>,
}

/// Embeds the report's entities and the bag's tiles and scores them. A report
/// with no entities scores [`UNGROUNDABLE_SCORE`] and is flagged rather than
/// treated as perfectly grounded.
pub fn ground_report(
    report: &str,
    bag: &PatchBag,
    lexicon: &Lexicon,
    image_embedder: &dyn ImageEmbedder,
    text_embedder: &dyn TextEmbedder,
) -> Result<GroundingReport, GroundingError> {
    let entities = extract_entities(report, lexicon);
    if entities.is_empty() {
        return Ok(GroundingReport {
            score: UNGROUNDABLE_SCORE,
            raw_mean: None,
            ungroundable: true,
            patch_count: bag.len(),
            evidence: Vec::new(),
        });
    }
    if bag.is_empty() {
        return Err(GroundingError::EmptyPatches);
    }
    let surfaces: Vec<&str> = entities.iter().map(|e| e.surface.as_str()).collect();
    let text_vecs = text_embedder.embed_texts(&surfaces)?;
    let tiles = bag.tiles();
    let patch_vecs = image_embedder.embed_images(&tiles)?;
    let t: Vec<&[f64]> = text_vecs.iter().map(|v| v.as_slice()).collect();
    let p: Vec<&[f64]> = patch_vecs.iter().map(|v| v.as_slice()).collect();
    let sim = similarity_matrix::<f64, _, _>(&t, &p)?;
    let result = grounding_score(&sim)?;
    let evidence = entities
        .entities
        .into_iter()
        .zip(&result.matches)
        .map(|(e, m)| {
            let patch = &bag.patches[m.patch_index];
            EntityEvidence {
                surface: e.surface,
                term: e.term,
                category: e.category,
                span: e.span,
                best_patch_index: m.patch_index,
                best_patch_xy: (patch.x, patch.y),
                raw_cosine: m.raw_cosine,
            }
        })
        .collect();
    Ok(GroundingReport {
        score: result.score,
        raw_mean: Some(result.raw_mean),
        ungroundable: false,
        patch_count: bag.len(),
        evidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn matrix_entries() {
        let s = similarity_matrix::<f64, _, _>(&[vec![1.0, 0.0]], &[vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, 1.0]])
            .unwrap();
        assert_eq!(s.row(0), &[0.6, 1.0, 0.0]);
        assert!(matches!(
            similarity_matrix::<f64, _, _>(&[vec![1.0, 0.0]], &[vec![1.0]]),
            Err(GroundingError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn hand_worked_example() {
        let s = similarity_matrix::<f64, _, _>(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0], vec![0.6, 0.8]])
            .unwrap();
        let r = grounding_score(&s).unwrap();
        assert!((r.raw_mean - 0.9).abs() < 1e-12);
        assert!((r.score - 0.95).abs() < 1e-12);
        assert_eq!(r.matches[0].patch_index, 0);
        assert_eq!(r.matches[1].patch_index, 1);
    }

    #[test]
    fn ties_go_to_lowest_index_and_empty_errors() {
        let s = SimilarityMatrix::from_rows(vec![vec![0.3f32, 0.7, 0.7]]).unwrap();
        assert_eq!(grounding_score(&s).unwrap().matches[0].patch_index, 1);
        let empty = SimilarityMatrix::<f64>::from_rows(vec![]).unwrap();
        assert!(matches!(grounding_score(&empty), Err(GroundingError::EmptyEntities)));
        let no_patches = SimilarityMatrix::<f64>::from_rows(vec![vec![]]).unwrap();
        assert!(matches!(
            grounding_score(&no_patches),
            Err(GroundingError::EmptyPatches)
        ));
    }

    #[test]
    fn entity_permutation_keeps_score() {
        let mut rng = SeededRng::new(3);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..7).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let a = grounding_score(&SimilarityMatrix::from_rows(rows.clone()).unwrap()).unwrap();
        let mut rev = rows;
        rev.reverse();
        let b = grounding_score(&SimilarityMatrix::from_rows(rev).unwrap()).unwrap();
        assert!((a.score - b.score).abs() < 1e-12);
        let mut ma: Vec<_> = a.matches.iter().map(|m| m.raw_cosine.to_bits()).collect();
        let mut mb: Vec<_> = b.matches.iter().map(|m| m.raw_cosine.to_bits()).collect();
        ma.sort_unstable();
        mb.sort_unstable();
        assert_eq!(ma, mb);
    }
}
