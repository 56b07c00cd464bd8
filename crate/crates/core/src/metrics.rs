//! Map similarities and posterior evaluation scores.

use serde::{Deserialize, Serialize};

use crate::contact::{BlockRow, ContactMap};
use crate::error::{CoreError, Result};

/// Pearson correlation of two equal-length vectors; `None` when either side
/// has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean over upper trans blocks of the flattened-block Pearson correlation.
/// Degenerate blocks count as 0.
pub fn block_pearson(c: &ContactMap, c_ref: &ContactMap) -> Result<f64> {
    c.same_geometry(c_ref)?;
    let s: f64 = c
        .blocks()
        .iter()
        .zip(c_ref.blocks())
        .map(|(a, b)| pearson(a.data(), b.data()).unwrap_or(0.0))
        .sum();
    Ok(s / c.blocks().len() as f64)
}

/// Block-averaged Pearson correlation between two lines of blocks.
pub fn block_row_pearson(c: &BlockRow, c_ref: &BlockRow) -> Result<f64> {
    if c.chrom != c_ref.chrom
        || c.partners != c_ref.partners
        || c.blocks.iter().zip(&c_ref.blocks).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(CoreError::Geometry(format!(
            "block rows of chromosomes {} and {} differ in layout",
            c.chrom, c_ref.chrom
        )));
    }
    let s: f64 = c
        .blocks
        .iter()
        .zip(&c_ref.blocks)
        .map(|(a, b)| pearson(a.data(), b.data()).unwrap_or(0.0))
        .sum();
    Ok(s / c.blocks.len() as f64)
}

/// Pearson correlation per row of each chromosome's concatenated line of
/// trans blocks, averaged over rows with nonzero variance on both sides.
/// Returns 0 when no row qualifies.
pub fn row_pearson(c: &ContactMap, c_ref: &ContactMap) -> Result<f64> {
    c.same_geometry(c_ref)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..c.genome().num_chromosomes() {
        let (a, b) = (c.block_row(i), c_ref.block_row(i));
        for r in 0..a.rows() {
            if let Some(p) = pearson(&a.concat_row(r), &b.concat_row(r)) {
                sum += p;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_samples(samples: &[Vec<f64>], weights: &[f64], theta_ref: &[f64]) -> Result<()> {
    if samples.is_empty() {
        return Err(CoreError::Domain("empty sample set".into()));
    }
    if weights.len() != samples.len() {
        return Err(CoreError::Domain(format!(
            "{} weights for {} samples",
            weights.len(),
            samples.len()
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.len() != theta_ref.len()) {
        return Err(CoreError::Domain(format!(
            "sample of dimension {} against reference of dimension {}",
            s.len(),
            theta_ref.len()
        )));
    }
    Ok(())
}

/// Weights normalized to sum 1.
fn normalized(weights: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = weights.iter().sum();
    if s.is_nan() || s <= 0.0 || weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(CoreError::Domain(
            "weights must be non-negative with positive sum".into(),
        ));
    }
    Ok(weights.iter().map(|w| w / s).collect())
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Weighted mean over samples of `||theta - theta_ref||`.
pub fn euclidean_mean_weighted(samples: &[Vec<f64>], weights: &[f64], theta_ref: &[f64]) -> Result<f64> {
    check_samples(samples, weights, theta_ref)?;
    let w = normalized(weights)?;
    Ok(samples.iter().zip(&w).map(|(s, w)| w * euclidean(s, theta_ref)).sum())
}

pub fn euclidean_mean(samples: &[Vec<f64>], theta_ref: &[f64]) -> Result<f64> {
    euclidean_mean_weighted(samples, &uniform(samples.len()), theta_ref)
}

/// Wasserstein-2 distance between a weighted sample cloud and the point
/// mass at `theta_ref`: the root weighted mean squared distance.
pub fn wasserstein2_to_dirac_weighted(samples: &[Vec<f64>], weights: &[f64], theta_ref: &[f64]) -> Result<f64> {
    check_samples(samples, weights, theta_ref)?;
    let w = normalized(weights)?;
    let ms: f64 = samples
        .iter()
        .zip(&w)
        .map(|(s, w)| {
            let d = euclidean(s, theta_ref);
            w * d * d
        })
        .sum();
    Ok(ms.sqrt())
}

pub fn wasserstein2_to_dirac(samples: &[Vec<f64>], theta_ref: &[f64]) -> Result<f64> {
    wasserstein2_to_dirac_weighted(samples, &uniform(samples.len()), theta_ref)
}

/// Gaussian kernel bandwidth for MMD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the samples pooled with the reference.
    #[default]
    Median,
}

/// Samples beyond this count are ignored when computing the median heuristic.
const MEDIAN_POOL_CAP: usize = 1000;

/// Median pairwise Euclidean distance over `samples` plus `theta_ref`;
/// falls back to 1 when the median is 0.
pub fn median_bandwidth(samples: &[Vec<f64>], theta_ref: &[f64]) -> f64 {
    let mut pool: Vec<&[f64]> = samples.iter().take(MEDIAN_POOL_CAP).map(Vec::as_slice).collect();
    pool.push(theta_ref);
    let mut d = Vec::with_capacity(pool.len() * (pool.len() - 1) / 2);
    for a in 0..pool.len() {
        for b in a + 1..pool.len() {
            d.push(euclidean(pool[a], pool[b]));
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Maximum mean discrepancy with a Gaussian kernel between a weighted sample
/// cloud and the point mass at `theta_ref`.
pub fn mmd_to_dirac_weighted(
    samples: &[Vec<f64>],
    weights: &[f64],
    theta_ref: &[f64],
    bandwidth: Bandwidth,
) -> Result<f64> {
    check_samples(samples, weights, theta_ref)?;
    let w = normalized(weights)?;
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => return Err(CoreError::Domain(format!("bandwidth {h} must be positive"))),
        Bandwidth::Median => median_bandwidth(samples, theta_ref),
    };
    let k = |a: &[f64], b: &[f64]| {
        let d = euclidean(a, b);
        (-d * d / (2.0 * h * h)).exp()
    };
    let mut kxx = 0.0;
    for (a, wa) in samples.iter().zip(&w) {
        let mut row = 0.0;
        for (b, wb) in samples.iter().zip(&w) {
            row += wb * k(a, b);
        }
        kxx += wa * row;
    }
    let kxy: f64 = samples.iter().zip(&w).map(|(s, w)| w * k(s, theta_ref)).sum();
    Ok((kxx - 2.0 * kxy + 1.0).max(0.0).sqrt())
}

pub fn mmd_to_dirac(samples: &[Vec<f64>], theta_ref: &[f64], bandwidth: Bandwidth) -> Result<f64> {
    mmd_to_dirac_weighted(samples, &uniform(samples.len()), theta_ref, bandwidth)
}

/// `|weighted mean of theta_i - theta_ref_i|` per dimension; uniform weights
/// when `weights` is `None`.
pub fn per_dim_abs_error(samples: &[Vec<f64>], weights: Option<&[f64]>, theta_ref: &[f64]) -> Result<Vec<f64>> {
    let w = match weights {
        Some(w) => w.to_vec(),
        None => uniform(samples.len()),
    };
    check_samples(samples, &w, theta_ref)?;
    let w = normalized(&w)?;
    Ok(weighted_mean(samples, &w)
        .iter()
        .zip(theta_ref)
        .map(|(m, t)| (m - t).abs())
        .collect())
}

/// Componentwise mean of `samples` under normalized weights `w`.
pub fn weighted_mean(samples: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut m = vec![0.0; samples[0].len()];
    for (s, w) in samples.iter().zip(w) {
        m.iter_mut().zip(s).for_each(|(m, x)| *m += w * x);
    }
    m
}

/// Evaluation scores of one posterior approximation against the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub euclidean_mean: f64,
    pub per_dim_abs_error: Vec<f64>,
    pub mmd: f64,
    pub w2: f64,
    pub n_samples: usize,
}

pub fn evaluate(
    samples: &[Vec<f64>],
    weights: Option<&[f64]>,
    theta_ref: &[f64],
    bandwidth: Bandwidth,
) -> Result<EvalMetrics> {
    let w = match weights {
        Some(w) => w.to_vec(),
        None => uniform(samples.len()),
    };
    Ok(EvalMetrics {
        euclidean_mean: euclidean_mean_weighted(samples, &w, theta_ref)?,
        per_dim_abs_error: per_dim_abs_error(samples, Some(&w), theta_ref)?,
        mmd: mmd_to_dirac_weighted(samples, &w, theta_ref, bandwidth)?,
        w2: wasserstein2_to_dirac_weighted(samples, &w, theta_ref)?,
        n_samples: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_basics() {
        let p = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((p - 1.0).abs() < 1e-15);
        let p = pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((p + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn euclidean_examples() {
        assert_eq!(euclidean(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(euclidean(&[1.0, 2.0, 3.0], &[1.0, 7.0, 3.0]), 5.0);
        assert_eq!(euclidean(&[3.0, 0.0], &[0.0, 4.0]), 5.0);
    }

    #[test]
    fn w2_closed_forms() {
        let r = vec![0.0, 0.0];
        assert_eq!(wasserstein2_to_dirac(&[r.clone(), r.clone()], &r).unwrap(), 0.0);
        let s = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        assert!((wasserstein2_to_dirac(&s, &r).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(wasserstein2_to_dirac(&[], &r).is_err());
    }

    #[test]
    fn mmd_closed_forms() {
        let r = vec![5.0, 5.0];
        assert_eq!(mmd_to_dirac(&vec![r.clone(); 4], &r, Bandwidth::Median).unwrap(), 0.0);
        let (d, h) = (3.0, 2.0);
        let got = mmd_to_dirac(&[vec![5.0 + d, 5.0]], &r, Bandwidth::Fixed(h)).unwrap();
        let want = (2.0 - 2.0 * (-d * d / (2.0 * h * h)).exp()).sqrt();
        assert!((got - want).abs() < 1e-14);
        assert!(mmd_to_dirac(&[], &r, Bandwidth::Median).is_err());
    }

    #[test]
    fn per_dim_examples() {
        let r = vec![10.0, 20.0];
        let sym = vec![vec![8.0, 23.0], vec![12.0, 17.0]];
        assert!(per_dim_abs_error(&sym, None, &r)
            .unwrap()
            .iter()
            .all(|e| e.abs() < 1e-12));
        assert_eq!(
            per_dim_abs_error(&[vec![13.0, 16.0]], None, &r).unwrap(),
            vec![3.0, 4.0]
        );
        let s = vec![vec![0.0, 0.0], vec![4.0, 8.0]];
        // weighted mean = (3, 6)
        let e = per_dim_abs_error(&s, Some(&[1.0, 3.0]), &r).unwrap();
        assert!((e[0] - 7.0).abs() < 1e-12 && (e[1] - 14.0).abs() < 1e-12);
    }
}
