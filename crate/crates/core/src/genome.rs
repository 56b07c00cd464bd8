//! Genome geometry: chromosome lengths, bin arithmetic and the uniform
//! prior over centromere positions.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, CoreError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chromosome {
    pub name: String,
    pub length_bp: u64,
}

/// Chromosome lengths plus the map resolution. All bin geometry derives
/// from this.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGenome", into = "RawGenome")]
pub struct GenomeSpec {
    resolution: u64,
    chromosomes: Vec<Chromosome>,
}

#[derive(Serialize, Deserialize)]
struct RawGenome {
    resolution_bp: u64,
    chromosomes: Vec<Chromosome>,
}

impl TryFrom<RawGenome> for GenomeSpec {
    type Error = CoreError;

    fn try_from(raw: RawGenome) -> Result<Self> {
        GenomeSpec::new(raw.resolution_bp, raw.chromosomes)
    }
}

impl From<GenomeSpec> for RawGenome {
    fn from(g: GenomeSpec) -> Self {
        RawGenome {
            resolution_bp: g.resolution,
            chromosomes: g.chromosomes,
        }
    }
}

impl GenomeSpec {
    pub fn new(resolution_bp: u64, chromosomes: Vec<Chromosome>) -> Result<Self> {
        if resolution_bp == 0 {
            return domain("resolution must be positive");
        }
        if chromosomes.len() < 2 {
            return domain(format!("need at least 2 chromosomes, got {}", chromosomes.len()));
        }
        for c in &chromosomes {
            if c.length_bp <= resolution_bp {
                return domain(format!(
                    "chromosome {} ({} bp) is not longer than the resolution ({resolution_bp} bp)",
                    c.name, c.length_bp
                ));
            }
        }
        Ok(Self {
            resolution: resolution_bp,
            chromosomes,
        })
    }

    /// Unnamed chromosomes `chr1..chrL`.
    pub fn from_lengths(resolution_bp: u64, lengths: &[u64]) -> Result<Self> {
        Self::new(
            resolution_bp,
            lengths
                .iter()
                .enumerate()
                .map(|(i, &l)| Chromosome {
                    name: format!("chr{}", i + 1),
                    length_bp: l,
                })
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let load_err = |detail: String| CoreError::Load {
            path: path.to_path_buf(),
            detail,
        };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn resolution(&self) -> u64 {
        self.resolution
    }

    pub fn num_chromosomes(&self) -> usize {
        self.chromosomes.len()
    }

    pub fn chromosomes(&self) -> &[Chromosome] {
        &self.chromosomes
    }

    pub fn name(&self, i: usize) -> &str {
        &self.chromosomes[i].name
    }

    pub fn length(&self, i: usize) -> u64 {
        self.chromosomes[i].length_bp
    }

    /// Number of bins of chromosome `i`; a trailing partial window gets its
    /// own bin.
    pub fn bins(&self, i: usize) -> usize {
        self.length(i).div_ceil(self.resolution) as usize
    }

    pub fn total_bins(&self) -> usize {
        (0..self.num_chromosomes()).map(|i| self.bins(i)).sum()
    }

    pub fn max_bins(&self) -> usize {
        (0..self.num_chromosomes()).map(|i| self.bins(i)).max().unwrap_or(0)
    }

    /// First bin of chromosome `i` in the concatenated genome.
    pub fn bin_offset(&self, i: usize) -> usize {
        (0..i).map(|k| self.bins(k)).sum()
    }

    fn check_chrom(&self, i: usize) -> Result<()> {
        if i >= self.num_chromosomes() {
            return domain(format!(
                "chromosome index {i} out of range (L = {})",
                self.num_chromosomes()
            ));
        }
        Ok(())
    }

    /// Bin holding position `pos` (bp) of chromosome `i`.
    pub fn bp_to_bin(&self, i: usize, pos: f64) -> Result<usize> {
        self.check_chrom(i)?;
        let len = self.length(i) as f64;
        if !(0.0..=len).contains(&pos) {
            return domain(format!("position {pos} outside chromosome {} [0, {len}]", self.name(i)));
        }
        Ok((pos / self.resolution as f64).floor() as usize)
    }

    /// Center of bin `k`, in bp.
    pub fn bin_to_bp(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.resolution as f64
    }

    /// Shape of the trans block pairing chromosome `i` (rows) with `j` (columns).
    pub fn block_shape(&self, i: usize, j: usize) -> Result<(usize, usize)> {
        self.check_chrom(i)?;
        self.check_chrom(j)?;
        if i == j {
            return domain(format!("cis block ({i}, {i}) is not modeled"));
        }
        Ok((self.bins(i), self.bins(j)))
    }

    /// Number of upper trans blocks, `L (L - 1) / 2`.
    pub fn num_pairs(&self) -> usize {
        let l = self.num_chromosomes();
        l * (l - 1) / 2
    }

    /// Upper trans pairs `(i, j)`, `i < j`, in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        let l = self.num_chromosomes();
        (0..l).flat_map(move |i| (i + 1..l).map(move |j| (i, j)))
    }

    /// Position of pair `(i, j)`, `i < j`, in [`Self::pairs`] order.
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j);
        let l = self.num_chromosomes();
        i * l - i * (i + 1) / 2 + (j - i - 1)
    }

    /// Uniform prior on `prod_i [1, l_i - 1]`.
    pub fn prior(&self) -> BoxPrior {
        BoxPrior::new(
            self.chromosomes.iter().map(|_| 1.0).collect(),
            self.chromosomes.iter().map(|c| c.length_bp as f64 - 1.0).collect(),
        )
    }

    /// One-dimensional prior of chromosome `i`.
    pub fn chromosome_prior(&self, i: usize) -> BoxPrior {
        BoxPrior::new(vec![1.0], vec![self.length(i) as f64 - 1.0])
    }

    pub fn sample_prior(&self, rng: &mut impl Rng) -> CentromereVector {
        CentromereVector(self.prior().sample(rng))
    }

    pub fn prior_logpdf(&self, theta: &CentromereVector) -> f64 {
        self.prior().log_pdf(&theta.0)
    }

    /// Checks that `theta` has one coordinate per chromosome inside the prior.
    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_chromosomes() {
            return Err(CoreError::Geometry(format!(
                "theta has {} coordinates for {} chromosomes",
                theta.len(),
                self.num_chromosomes()
            )));
        }
        let prior = self.prior();
        if !prior.contains(theta) {
            return domain(format!("theta {theta:?} outside the prior support"));
        }
        Ok(())
    }

    /// Genome restricted to the given chromosomes, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            self.check_chrom(i)?;
        }
        Self::new(
            self.resolution,
            indices.iter().map(|&i| self.chromosomes[i].clone()).collect(),
        )
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("genome serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One centromere position (bp) per chromosome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CentromereVector(pub Vec<f64>);

impl CentromereVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Independent uniform distributions on `[lower_d, upper_d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrior {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxPrior {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert!(lower.iter().zip(&upper).all(|(l, u)| l < u));
        Self { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| *l <= *t && *t <= *u)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| rng.random_range(*l..=*u))
            .collect()
    }

    /// Log density; `-inf` outside the support.
    pub fn log_pdf(&self, theta: &[f64]) -> f64 {
        if !self.contains(theta) {
            return f64::NEG_INFINITY;
        }
        -self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l).ln())
            .sum::<f64>()
    }

    /// Maps `theta` to `[0, 1]^d`.
    pub fn to_unit(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, u))| (t - l) / (u - l))
            .collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, h))| l + v * (h - l))
            .collect()
    }
}
