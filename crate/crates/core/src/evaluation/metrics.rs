//! Inception score, Fréchet distance between activation statistics and
//! caption retrieval precision.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Exponentiated mean KL between each row and the split marginal, over
/// `splits` equal chunks (remainder rows dropped). Returns (mean, std).
pub fn inception_score(class_probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    let n = class_probs.len();
    if splits == 0 || n < splits {
        return Err(Error::InvalidInput(format!("{n} rows cannot form {splits} splits")));
    }
    let c = class_probs[0].len();
    for (i, row) in class_probs.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.len() != c || row.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("row {i} is not a distribution")));
        }
    }
    let size = n / splits;
    let scores: Vec<f64> = (0..splits)
        .map(|k| {
            let part = &class_probs[k * size..(k + 1) * size];
            let mut marginal = vec![0.0; c];
            for row in part {
                for (m, p) in marginal.iter_mut().zip(row) {
                    *m += p / size as f64;
                }
            }
            let kl: f64 = part
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&marginal)
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, m)| p * (p.ln() - m.ln()))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / size as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Gaussian summary of feature activations.
#[derive(Debug, Clone)]
pub struct ActivationSet {
    pub n: usize,
    pub mean: DVector<f64>,
    /// Unbiased sample covariance.
    pub covariance: DMatrix<f64>,
}

impl ActivationSet {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::InvalidInput("need at least two activation rows".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("ragged activation rows".into()));
        }
        if n < d {
            log::warn!("activation set has {n} rows for dimension {d}; covariance is rank deficient");
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut covariance = centered.transpose() * &centered / (n - 1) as f64;
        // exact symmetry
        covariance = (&covariance + covariance.transpose()) * 0.5;
        Ok(Self { n, mean, covariance })
    }

    pub fn from_moments(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("covariance does not match mean".into()));
        }
        Ok(Self {
            n: 0,
            mean: DVector::from_vec(mean),
            covariance: DMatrix::from_fn(d, d, |i, j| covariance[i][j]),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric PSD square root; eigenvalues within -1e-8 of zero are clamped.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| clamp_eig(v).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

fn clamp_eig(v: f64) -> f64 {
    if v < -1e-8 {
        log::warn!("covariance eigenvalue {v:e} below tolerance; clamped to 0");
    }
    v.max(0.0)
}

/// `|mu_r - mu_f|^2 + Tr(S_r + S_f - 2 (S_r S_f)^(1/2))`, with the trace of
/// the cross term taken from the symmetric form `sqrt(S_r) S_f sqrt(S_r)`.
pub fn fid(real: &ActivationSet, fake: &ActivationSet) -> Result<f64> {
    if real.dim() != fake.dim() {
        return Err(Error::InvalidInput(format!(
            "feature dims differ: {} vs {}",
            real.dim(),
            fake.dim()
        )));
    }
    let diff = &real.mean - &fake.mean;
    let sr = sqrt_psd(&real.covariance);
    let mut m = &sr * &fake.covariance * &sr;
    m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| clamp_eig(*v).sqrt()).sum();
    let d = diff.norm_squared() + real.covariance.trace() + fake.covariance.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Fraction of images whose true caption scores strictly higher (cosine)
/// than each of `distractors` captions drawn without replacement from the
/// captions `eligible(image, caption)` admits.
pub fn r_precision<R: Rng>(
    image_features: &[Vec<f64>],
    true_caption: &[usize],
    caption_features: &[Vec<f64>],
    eligible: impl Fn(usize, usize) -> bool,
    distractors: usize,
    rng: &mut R,
) -> Result<f64> {
    if image_features.is_empty() || image_features.len() != true_caption.len() {
        return Err(Error::InvalidInput("image and caption lists differ".into()));
    }
    let mut hits = 0usize;
    for (i, (img, &t)) in image_features.iter().zip(true_caption).enumerate() {
        let pool: Vec<usize> = (0..caption_features.len()).filter(|&c| c != t && eligible(i, c)).collect();
        if pool.len() < distractors {
            return Err(Error::InvalidInput(format!(
                "caption pool too small: {} candidates for {distractors} distractors",
                pool.len()
            )));
        }
        let own = cosine(img, &caption_features[t]);
        let beaten = sample(rng, pool.len(), distractors)
            .into_iter()
            .all(|k| cosine(img, &caption_features[pool[k]]) < own);
        if beaten {
            hits += 1;
        }
    }
    Ok(hits as f64 / image_features.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_rows_score_one() {
        let rows = vec![vec![0.2, 0.3, 0.5]; 20];
        let (m, s) = inception_score(&rows, 10).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && s.abs() < 1e-12);
    }

    #[test]
    fn invalid_rows_rejected() {
        assert!(inception_score(&[vec![0.5, 0.6]], 1).is_err());
        assert!(inception_score(&[vec![1.0, 0.0]], 2).is_err());
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
        let a = ActivationSet::from_rows(&rows).unwrap();
        assert!(fid(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn pool_too_small() {
        let f = vec![vec![1.0, 0.0]; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(r_precision(&f, &[0, 1, 2], &f, |_, _| true, 5, &mut rng).is_err());
        assert_eq!(r_precision(&f, &[0, 1, 2], &f, |_, _| true, 0, &mut rng).unwrap(), 1.0);
    }
}
