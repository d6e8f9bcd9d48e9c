//! Statistics behind the sensitivity, determinism, ablation and domain-gap
//! experiments.

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::scalar::{mean, Scalar};

/// Relative drop in percent: `100 · (mean(control) − mean(perturbed)) / mean(control)`.
pub fn sensitivity_delta<T: Scalar>(control: &[T], perturbed: &[T]) -> Result<T, ExperimentError> {
    let c = mean(control).ok_or(ExperimentError::EmptyInput("control scores"))?;
    let p = mean(perturbed).ok_or(ExperimentError::EmptyInput("perturbed scores"))?;
    if c <= T::zero() {
        return Err(ExperimentError::ZeroControlMean);
    }
    Ok(T::lit(100.0) * (c - p) / c)
}

/// Midranks (1-based): tied values share the mean of the ranks they span.
pub fn midranks<T: Scalar>(xs: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![T::zero(); xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1
        let r = T::from_count(i + j + 2) / T::lit(2.0);
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson<T: Scalar>(xs: &[T], ys: &[T]) -> Result<T, ExperimentError> {
    let n = T::from_count(xs.len());
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(ExperimentError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp_to(-T::one(), T::one()))
}

/// Spearman's ρ: Pearson correlation of the midrank vectors.
pub fn spearman_rho<T: Scalar>(xs: &[T], ys: &[T]) -> Result<T, ExperimentError> {
    if xs.len() != ys.len() {
        return Err(ExperimentError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(ExperimentError::TooFewSamples { need: 2, got: xs.len() });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(ExperimentError::NonFinite);
    }
    pearson(&midranks(xs), &midranks(ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunVariance<T> {
    /// Population standard deviation of each case across runs.
    pub per_case_std: Vec<T>,
    pub max_std: T,
    pub mean_std: T,
}

/// `runs[r][c]` is the score of case `c` in run `r`. Deviations are taken
/// from the first run's value, so identical runs give exactly zero.
pub fn run_variance<T: Scalar>(runs: &[Vec<T>]) -> Result<RunVariance<T>, ExperimentError> {
    if runs.len() < 2 {
        return Err(ExperimentError::TooFewSamples {
            need: 2,
            got: runs.len(),
        });
    }
    let cases = runs[0].len();
    if let Some(bad) = runs.iter().find(|r| r.len() != cases) {
        return Err(ExperimentError::LengthMismatch {
            left: cases,
            right: bad.len(),
        });
    }
    let n = T::from_count(runs.len());
    let per_case_std: Vec<T> = (0..cases)
        .map(|c| {
            let base = runs[0][c];
            let d: Vec<T> = runs.iter().map(|r| r[c] - base).collect();
            let m = d.iter().copied().sum::<T>() / n;
            let var = d.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / n;
            var.sqrt()
        })
        .collect();
    let max_std = per_case_std.iter().copied().fold(T::zero(), T::max);
    let mean_std = mean(&per_case_std).unwrap_or(T::zero());
    Ok(RunVariance {
        per_case_std,
        max_std,
        mean_std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainGap<T> {
    pub mean_in: T,
    pub mean_out: T,
    pub drop: T,
}

/// In-domain minus out-of-domain mean score.
pub fn domain_gap<T: Scalar>(scores_in: &[T], scores_out: &[T]) -> Result<DomainGap<T>, ExperimentError> {
    let mean_in = mean(scores_in).ok_or(ExperimentError::EmptyInput("in-domain scores"))?;
    let mean_out = mean(scores_out).ok_or(ExperimentError::EmptyInput("out-of-domain scores"))?;
    Ok(DomainGap {
        mean_in,
        mean_out,
        drop: mean_in - mean_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_deltas() {
        let d = sensitivity_delta(&[0.77], &[0.46]).unwrap();
        assert_eq!(format!("{d:.1}"), "40.3");
        let d = sensitivity_delta(&[0.92], &[0.90]).unwrap();
        assert_eq!(format!("{d:.1}"), "2.2");
        assert_eq!(sensitivity_delta(&[0.5, 0.7], &[0.5, 0.7]).unwrap(), 0.0);
        assert!(matches!(
            sensitivity_delta(&[0.0], &[0.1]),
            Err(ExperimentError::ZeroControlMean)
        ));
        assert!(sensitivity_delta::<f64>(&[], &[0.1]).is_err());
    }

    #[test]
    fn spearman_hand_cases() {
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5);
        assert!(matches!(
            spearman_rho(&[1.0, 1.0], &[1.0, 2.0]),
            Err(ExperimentError::ConstantInput)
        ));
        assert!(matches!(
            spearman_rho(&[1.0], &[1.0]),
            Err(ExperimentError::TooFewSamples { .. })
        ));
        assert!(matches!(
            spearman_rho(&[1.0, 2.0], &[1.0]),
            Err(ExperimentError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn variance_cases() {
        let v = run_variance(&[vec![0.5, 0.1], vec![0.5, 0.1], vec![0.5, 0.1]]).unwrap();
        assert_eq!(v.max_std, 0.0);
        let v = run_variance(&[vec![0.5f64], vec![0.7]]).unwrap();
        assert!((v.per_case_std[0] - 0.1).abs() < 1e-12);
        assert!(run_variance(&[vec![0.5]]).is_err());
    }

    #[test]
    fn gaps() {
        let g = domain_gap(&[0.801], &[0.737]).unwrap();
        assert_eq!(format!("{:.3}", g.drop), "0.064");
        let g = domain_gap(&[0.845], &[0.836]).unwrap();
        assert_eq!(format!("{:.3}", g.drop), "0.009");
        assert_eq!(domain_gap(&[0.3, 0.4], &[0.3, 0.4]).unwrap().drop, 0.0);
    }
}
