//! Contact-map simulator: one Gaussian interaction peak per trans block at
//! the pair of centromere positions, plus Gaussian background noise.
//!
//! Pixel `k` of chromosome `i` covers `[k r, (k + 1) r)` bp and is evaluated
//! at its center, so a centromere at `theta` bp sits at fractional pixel
//! coordinate `theta / r - 0.5`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contact::{Block, BlockRow, ContactMap};
use crate::error::{domain, Result};
use crate::genome::GenomeSpec;

/// Shape of the interaction peaks, shared by every block of one map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Peak variance in squared bins.
    pub sigma2: f64,
    /// Intensity factor.
    pub alpha: u32,
    /// Noise level as a fraction of the block maximum (mean and sd are each
    /// half of it).
    pub noise_frac: f64,
}

impl SimParams {
    pub const DEFAULT_NOISE_FRAC: f64 = 0.10;

    pub fn new(sigma2: f64, alpha: u32, noise_frac: f64) -> Result<Self> {
        if !(0.1..=10.0).contains(&sigma2) {
            return domain(format!("sigma2 {sigma2} outside [0.1, 10]"));
        }
        if !(1..=1000).contains(&alpha) {
            return domain(format!("alpha {alpha} outside [1, 1000]"));
        }
        if !(0.0..=1.0).contains(&noise_frac) {
            return domain(format!("noise_frac {noise_frac} outside [0, 1]"));
        }
        Ok(Self {
            sigma2,
            alpha,
            noise_frac,
        })
    }

    /// `sigma2 ~ U(0.1, 10)`, `alpha ~ U{1..1000}`, default noise.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let sigma2 = rng.random_range(0.1..10.0);
        let alpha = rng.random_range(1..=1000u32);
        Self {
            sigma2,
            alpha,
            noise_frac: Self::DEFAULT_NOISE_FRAC,
        }
    }
}

pub fn sample_sim_params(rng: &mut impl Rng) -> SimParams {
    SimParams::sample(rng)
}

fn axis_profile(n: usize, theta_bp: f64, resolution: f64, sigma2: f64) -> Vec<f64> {
    let mu = theta_bp / resolution - 0.5;
    (0..n)
        .map(|x| {
            let d = x as f64 - mu;
            (-d * d / (2.0 * sigma2)).exp()
        })
        .collect()
}

/// Scaled Gaussian surface `alpha * N((x, y); mu, sigma2 I)` without noise.
pub fn noiseless_block(
    genome: &GenomeSpec,
    i: usize,
    j: usize,
    theta_i: f64,
    theta_j: f64,
    params: &SimParams,
) -> Result<Block> {
    let (rows, cols) = genome.block_shape(i, j)?;
    if rows == 0 || cols == 0 {
        return domain(format!("block ({i},{j}) has no pixels"));
    }
    let r = genome.resolution() as f64;
    let gx = axis_profile(rows, theta_i, r, params.sigma2);
    let gy = axis_profile(cols, theta_j, r, params.sigma2);
    let norm = params.alpha as f64 / (2.0 * PI * params.sigma2);
    let mut data = Vec::with_capacity(rows * cols);
    for a in &gx {
        let s = norm * a;
        data.extend(gy.iter().map(|b| s * b));
    }
    Block::new(rows, cols, data)
}

/// Adds `N(h m, (h m)^2)` noise, `h = noise_frac / 2`, `m` the block maximum,
/// one standard normal per pixel in row-major order, then clamps at zero.
fn add_noise(block: &mut Block, noise_frac: f64, rng: &mut impl Rng) {
    if noise_frac == 0.0 {
        return;
    }
    let sd = 0.5 * noise_frac * block.max();
    for v in block.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = (*v + sd + sd * z).max(0.0);
    }
}

/// One trans block `(i, j)` with chromosome `i` on the rows.
pub fn simulate_block(
    genome: &GenomeSpec,
    i: usize,
    j: usize,
    theta_i: f64,
    theta_j: f64,
    params: &SimParams,
    rng: &mut impl Rng,
) -> Result<Block> {
    let mut b = noiseless_block(genome, i, j, theta_i, theta_j, params)?;
    add_noise(&mut b, params.noise_frac, rng);
    Ok(b)
}

/// Full map with freshly drawn peak parameters.
pub fn simulate_map(genome: &GenomeSpec, theta: &[f64], rng: &mut impl Rng) -> Result<ContactMap> {
    let params = SimParams::sample(rng);
    simulate_map_with(genome, theta, &params, rng)
}

pub fn simulate_map_with(
    genome: &GenomeSpec,
    theta: &[f64],
    params: &SimParams,
    rng: &mut impl Rng,
) -> Result<ContactMap> {
    genome.check_theta(theta)?;
    let blocks = genome
        .pairs()
        .map(|(i, j)| simulate_block(genome, i, j, theta[i], theta[j], params, rng))
        .collect::<Result<Vec<_>>>()?;
    ContactMap::new(genome.clone(), blocks)
}

/// Line of blocks of chromosome `i`. Partner centromeres are nuisance
/// parameters drawn from their priors on every call.
pub fn simulate_block_row(genome: &GenomeSpec, i: usize, theta_i: f64, rng: &mut impl Rng) -> Result<BlockRow> {
    let params = SimParams::sample(rng);
    simulate_block_row_with(genome, i, theta_i, &params, None, rng)
}

/// Block row with explicit peak parameters; `partners`, when given, holds
/// one centromere per chromosome (entry `i` ignored) instead of prior draws.
pub fn simulate_block_row_with(
    genome: &GenomeSpec,
    i: usize,
    theta_i: f64,
    params: &SimParams,
    partners: Option<&[f64]>,
    rng: &mut impl Rng,
) -> Result<BlockRow> {
    if i >= genome.num_chromosomes() {
        return domain(format!("chromosome index {i} out of range"));
    }
    if !genome.chromosome_prior(i).contains(&[theta_i]) {
        return domain(format!("theta_{i} = {theta_i} outside [1, {}]", genome.length(i) - 1));
    }
    let l = genome.num_chromosomes();
    let mut partner_ids = Vec::with_capacity(l - 1);
    let mut blocks = Vec::with_capacity(l - 1);
    for j in (0..l).filter(|&j| j != i) {
        let theta_j = match partners {
            Some(p) => p[j],
            None => genome.chromosome_prior(j).sample(rng)[0],
        };
        partner_ids.push(j);
        blocks.push(simulate_block(genome, i, j, theta_i, theta_j, params, rng)?);
    }
    Ok(BlockRow {
        chrom: i,
        partners: partner_ids,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn genome3() -> GenomeSpec {
        GenomeSpec::from_lengths(32_000, &[230_218, 813_184, 316_620]).unwrap()
    }

    #[test]
    fn params_support_and_alpha_mean() {
        let mut rng = seeded(1);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let p = sample_sim_params(&mut rng);
            assert!(SimParams::new(p.sigma2, p.alpha, p.noise_frac).is_ok());
            sum += p.alpha as f64;
        }
        assert!((sum / n as f64 - 500.5).abs() < 0.01 * 500.5);
        assert_eq!(sample_sim_params(&mut seeded(9)), sample_sim_params(&mut seeded(9)));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(SimParams::new(0.05, 1, 0.1).is_err());
        assert!(SimParams::new(1.0, 0, 0.1).is_err());
        assert!(SimParams::new(1.0, 1001, 0.1).is_err());
        assert!(SimParams::new(1.0, 10, 1.5).is_err());
    }

    #[test]
    fn peak_value_at_mode() {
        let g = GenomeSpec::from_lengths(32_000, &[6 * 32_000, 8 * 32_000]).unwrap();
        let p = SimParams::new(1.0, 1, 0.0).unwrap();
        // centers of pixel 2 and pixel 3
        let b = simulate_block(&g, 0, 1, 2.5 * 32_000.0, 3.5 * 32_000.0, &p, &mut seeded(0)).unwrap();
        assert_eq!(b.argmax(), (2, 3));
        assert!((b.get(2, 3) - 1.0 / (2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn noise_is_seed_determined() {
        let g = genome3();
        let p = SimParams::new(2.0, 300, 0.10).unwrap();
        let clean = noiseless_block(&g, 0, 2, 150_000.0, 100_000.0, &p).unwrap();
        let noisy = simulate_block(&g, 0, 2, 150_000.0, 100_000.0, &p, &mut seeded(42)).unwrap();
        let mut rng = seeded(42);
        let h = 0.05 * clean.max();
        for (c, n) in clean.data().iter().zip(noisy.data()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            assert_eq!(*n, (c + h + h * z).max(0.0));
        }
    }

    #[test]
    fn map_block_counts() {
        let mut rng = seeded(2);
        let g = genome3();
        let t = g.sample_prior(&mut rng);
        assert_eq!(simulate_map(&g, &t.0, &mut rng).unwrap().blocks().len(), 3);
        let g16 = GenomeSpec::from_lengths(32_000, &[200_000; 16]).unwrap();
        let t = g16.sample_prior(&mut rng);
        assert_eq!(simulate_map(&g16, &t.0, &mut rng).unwrap().blocks().len(), 120);
    }

    #[test]
    fn map_entries_non_negative() {
        let mut rng = seeded(3);
        let g = genome3();
        for _ in 0..20 {
            let t = g.sample_prior(&mut rng);
            let m = simulate_map(&g, &t.0, &mut rng).unwrap();
            assert!(m.blocks().iter().all(|b| b.data().iter().all(|v| *v >= 0.0)));
        }
    }

    #[test]
    fn rejects_theta_outside_prior() {
        let g = genome3();
        assert!(simulate_map(&g, &[0.0, 1000.0, 1000.0], &mut seeded(0)).is_err());
        assert!(simulate_map(&g, &[1000.0, 1000.0], &mut seeded(0)).is_err());
        assert!(simulate_block_row(&g, 0, 230_218.0, &mut seeded(0)).is_err());
    }

    #[test]
    fn separable_without_noise() {
        let g = genome3();
        let p = SimParams::new(3.7, 17, 0.0).unwrap();
        let b = noiseless_block(&g, 1, 2, 400_000.0, 120_000.0, &p).unwrap();
        for (x, x2, y, y2) in [(3, 20, 1, 7), (12, 13, 4, 5), (0, 25, 0, 9)] {
            let lhs = b.get(x, y) * b.get(x2, y2);
            let rhs = b.get(x, y2) * b.get(x2, y);
            assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()));
        }
    }

    #[test]
    fn alpha_does_not_move_peak() {
        let g = genome3();
        for alpha in [1, 7, 1000] {
            let p = SimParams::new(0.4, alpha, 0.0).unwrap();
            let b = noiseless_block(&g, 0, 1, 100_000.0, 500_000.0, &p).unwrap();
            assert_eq!(b.argmax(), (3, 15));
        }
    }

    #[test]
    fn block_row_shape_and_determinism() {
        let g = GenomeSpec::from_lengths(32_000, &(1..=16).map(|k| 100_000 + 40_000 * k).collect::<Vec<_>>()).unwrap();
        let row = simulate_block_row(&g, 4, 150_000.0, &mut seeded(8)).unwrap();
        assert_eq!(row.blocks.len(), 15);
        assert!(row.blocks.iter().all(|b| b.rows() == g.bins(4)));
        row.check_geometry(&g).unwrap();
        assert_eq!(row, simulate_block_row(&g, 4, 150_000.0, &mut seeded(8)).unwrap());
    }

    #[test]
    fn block_row_profile_peaks_at_theta_bin() {
        let g = genome3();
        let p = SimParams::new(1.5, 50, 0.0).unwrap();
        let theta = 500_000.0;
        let row = simulate_block_row_with(&g, 1, theta, &p, None, &mut seeded(4)).unwrap();
        let want = g.bp_to_bin(1, theta).unwrap();
        for b in &row.blocks {
            let profile: Vec<f64> = (0..b.rows()).map(|r| b.row(r).iter().sum()).collect();
            let arg = (0..profile.len())
                .max_by(|a, c| profile[*a].total_cmp(&profile[*c]))
                .unwrap();
            assert_eq!(arg, want);
        }
    }
}
