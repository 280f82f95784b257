//! Mean pairwise cosine similarity of unit feature rows.

use crate::error::{Error, Result};
use crate::loss::UNIT_TOL;
use crate::model::FeatureMatrix;

/// `2/(M(M−1)) · Σ_{i<j} f_i·f_j`, computed as `(‖Σf‖² − Σ‖f‖²) / (M(M−1))`.
pub fn collapse_metric(features: &FeatureMatrix) -> Result<f64> {
    let m = features.rows;
    if m < 2 {
        return Err(Error::Contract(format!("collapse metric needs >= 2 rows, got {m}")));
    }
    features.check_unit(UNIT_TOL)?;
    let mut sum = vec![0.0; features.cols];
    let mut sq = 0.0;
    for i in 0..m {
        let r = features.row(i);
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
        sq += r.iter().map(|v| v * v).sum::<f64>();
    }
    let total: f64 = sum.iter().map(|v| v * v).sum();
    let mf = m as f64;
    Ok(((total - sq) / (mf * (mf - 1.0))).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_orthogonal_rows() {
        let same = FeatureMatrix::from_rows(&vec![vec![0.6, 0.8]; 5]);
        assert!((collapse_metric(&same).unwrap() - 1.0).abs() < 1e-12);
        let orth = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(collapse_metric(&orth).unwrap(), 0.0);
    }

    #[test]
    fn contract_violations() {
        let one = FeatureMatrix::from_rows(&[vec![1.0, 0.0]]);
        assert!(matches!(collapse_metric(&one), Err(Error::Contract(_))));
        let bad = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        assert!(collapse_metric(&bad).is_err());
    }
}
