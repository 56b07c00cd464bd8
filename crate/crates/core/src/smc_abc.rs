//! Sequential Monte Carlo ABC with top-quantile selection.
//!
//! Each round simulates `N` proposals, keeps the `M = ceil(accept N)`
//! closest to the observation, and weights them against the previous
//! population through a Gaussian perturbation kernel.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::genome::BoxPrior;
use crate::metrics::{block_pearson, block_row_pearson, euclidean};
use crate::rng::{derive_seed, seeded, stream, SimRng};
use crate::summary::SummaryNet;
use crate::task::{Observation, Task};

/// Scores parameter proposals against a fixed observation.
pub trait Discrepancy: Sync {
    /// Distance of the data simulated at each `theta`; proposal `k` draws
    /// its randomness from `rngs[k]` only.
    fn distances(&self, thetas: &[Vec<f64>], rngs: &mut [SimRng]) -> Result<Vec<f64>>;
}

/// `1 - ` block-averaged Pearson correlation with the reference.
pub struct PearsonDistance {
    pub task: Task,
    pub reference: Observation,
}

impl PearsonDistance {
    pub fn distance(&self, obs: &Observation) -> Result<f64> {
        let corr = match (obs, &self.reference) {
            (Observation::Map(a), Observation::Map(b)) => block_pearson(a, b)?,
            (Observation::Row(a), Observation::Row(b)) => block_row_pearson(a, b)?,
            _ => {
                return Err(CoreError::Geometry(
                    "observation kind differs from the reference".into(),
                ))
            }
        };
        Ok(1.0 - corr)
    }
}

impl Discrepancy for PearsonDistance {
    fn distances(&self, thetas: &[Vec<f64>], rngs: &mut [SimRng]) -> Result<Vec<f64>> {
        thetas
            .par_iter()
            .zip(rngs.par_iter_mut())
            .map(|(t, rng)| self.distance(&self.task.simulate(t, rng)?))
            .collect()
    }
}

/// Euclidean distance between learned summaries (bp).
pub struct SummaryDistance<'a> {
    pub task: Task,
    pub net: &'a SummaryNet,
    pub reference_summary: Vec<f64>,
}

impl<'a> SummaryDistance<'a> {
    pub fn new(task: Task, net: &'a SummaryNet, reference: &Observation) -> Result<Self> {
        let reference_summary = net.summarize(reference)?;
        Ok(Self {
            task,
            net,
            reference_summary,
        })
    }
}

/// Simulates every proposal and returns the observations in order.
pub fn simulate_all(task: &Task, thetas: &[Vec<f64>], rngs: &mut [SimRng]) -> Result<Vec<Observation>> {
    thetas
        .par_iter()
        .zip(rngs.par_iter_mut())
        .map(|(t, rng)| task.simulate(t, rng))
        .collect()
}

impl Discrepancy for SummaryDistance<'_> {
    fn distances(&self, thetas: &[Vec<f64>], rngs: &mut [SimRng]) -> Result<Vec<f64>> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(thetas.len());
        for (t, r) in thetas.chunks(CHUNK).zip(rngs.chunks_mut(CHUNK)) {
            let obs = simulate_all(&self.task, t, r)?;
            out.extend(
                self.net
                    .summarize_batch(&obs)?
                    .iter()
                    .map(|s| euclidean(s, &self.reference_summary)),
            );
        }
        Ok(out)
    }
}

/// Weighted particles retained by one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub round: usize,
    pub particles: Vec<Vec<f64>>,
    /// Normalized importance weights.
    pub weights: Vec<f64>,
    pub distances: Vec<f64>,
    /// Largest accepted distance.
    pub threshold: f64,
}

impl Population {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    pub rounds: usize,
    pub n_per_round: usize,
    pub accept: f64,
    /// Perturbation kernel standard deviation (bp).
    pub sigma: f64,
    pub seed: u64,
}

impl SmcConfig {
    pub fn new(sigma: f64, seed: u64) -> Self {
        Self {
            rounds: 11,
            n_per_round: 1000,
            accept: 0.05,
            sigma,
            seed,
        }
    }
}

/// Number of particles kept out of `n` draws.
pub fn kept_count(n: usize, accept: f64) -> Result<usize> {
    let x = accept * n as f64;
    if !(accept > 0.0 && accept <= 1.0) || x < 1.0 - 1e-9 {
        return Err(CoreError::Config(format!(
            "acceptance {accept} of {n} draws keeps no particle"
        )));
    }
    Ok(((x - 1e-9).ceil() as usize).clamp(1, n))
}

/// Indices of the `m` smallest distances; ties keep generation order and
/// NaN distances sort last.
pub fn select_best(distances: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    let key = |d: f64| if d.is_nan() { f64::INFINITY } else { d };
    idx.sort_by(|a, b| key(distances[*a]).total_cmp(&key(distances[*b])));
    idx.truncate(m);
    idx
}

const TAG_PROPOSE: u64 = 0x4142_4300_0001;
const TAG_SIM: u64 = 0x4142_4300_0002;

fn round_streams(seed: u64, round: usize, n: usize) -> Vec<SimRng> {
    let s = derive_seed(seed, round as u64);
    (0..n).map(|k| stream(s, TAG_SIM, k as u64)).collect()
}

fn keep(round: usize, thetas: Vec<Vec<f64>>, dist: Vec<f64>, m: usize) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
    let best = select_best(&dist, m);
    let threshold = best.last().map_or(f64::NAN, |&k| dist[k]);
    log::info!("ABC round {round}: kept {m}, threshold {threshold:.6}");
    let particles = best.iter().map(|&k| thetas[k].clone()).collect();
    let distances = best.iter().map(|&k| dist[k]).collect();
    (particles, distances, threshold)
}

/// First round: `n` prior draws, best `ceil(accept n)` kept with equal weights.
pub fn abc_round0(
    prior: &BoxPrior,
    distance: &dyn Discrepancy,
    n: usize,
    accept: f64,
    seed: u64,
) -> Result<Population> {
    let m = kept_count(n, accept)?;
    let mut rng = seeded(derive_seed(seed, TAG_PROPOSE));
    let thetas: Vec<Vec<f64>> = (0..n).map(|_| prior.sample(&mut rng)).collect();
    let dist = distance.distances(&thetas, &mut round_streams(seed, 0, n))?;
    let (particles, distances, threshold) = keep(0, thetas, dist, m);
    Ok(Population {
        round: 0,
        particles,
        weights: vec![1.0 / m as f64; m],
        distances,
        threshold,
    })
}

/// A perturbed proposal and the resampled particle it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub theta: Vec<f64>,
    pub base: Vec<f64>,
    /// The perturbation left the prior support and was undone.
    pub reverted: bool,
}

/// Resamples the population by weight, then perturbs the `(n mod M)`-th
/// resampled particle with isotropic Gaussian noise of sd `sigma` for each
/// of the `n` proposals. Out-of-support proposals revert to their base.
pub fn perturb(pop: &Population, prior: &BoxPrior, sigma: f64, n: usize, rng: &mut impl Rng) -> Result<Vec<Proposal>> {
    let m = pop.len();
    if m == 0 {
        return Err(CoreError::Domain("cannot perturb an empty population".into()));
    }
    let pick =
        WeightedIndex::new(&pop.weights).map_err(|e| CoreError::Domain(format!("invalid particle weights: {e}")))?;
    let resampled: Vec<&Vec<f64>> = (0..m).map(|_| &pop.particles[pick.sample(rng)]).collect();
    Ok((0..n)
        .map(|k| {
            let base = resampled[k % m];
            let theta: Vec<f64> = base
                .iter()
                .map(|b| {
                    let z: f64 = StandardNormal.sample(rng);
                    b + sigma * z
                })
                .collect();
            if prior.contains(&theta) {
                Proposal {
                    theta,
                    base: base.clone(),
                    reverted: false,
                }
            } else {
                Proposal {
                    theta: base.clone(),
                    base: base.clone(),
                    reverted: true,
                }
            }
        })
        .collect())
}

/// Log density of the isotropic Gaussian kernel `N(x; mu, sigma^2 I)`.
pub fn kernel_log_density(x: &[f64], mu: &[f64], sigma: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma)
}

/// Importance weights `prior(theta_m) / sum_k w_k K(theta_m; theta_k)`,
/// normalized to sum 1. Evaluated in log space.
pub fn compute_weights(accepted: &[Vec<f64>], previous: &Population, prior: &BoxPrior, sigma: f64) -> Result<Vec<f64>> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(CoreError::Domain(format!("kernel sd {sigma} must be positive")));
    }
    let logw: Vec<f64> = accepted
        .iter()
        .map(|t| {
            let terms: Vec<f64> = previous
                .particles
                .iter()
                .zip(&previous.weights)
                .map(|(p, w)| w.ln() + kernel_log_density(t, p, sigma))
                .collect();
            let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(CoreError::Runtime("importance weight denominator vanished".into()));
            }
            let lse = mx + terms.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            Ok(prior.log_pdf(t) - lse)
        })
        .collect::<Result<_>>()?;
    let mx = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Err(CoreError::Runtime("all accepted particles have zero weight".into()));
    }
    let raw: Vec<f64> = logw.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = raw.iter().sum();
    Ok(raw.iter().map(|v| v / s).collect())
}

/// One sequential round after the first.
pub fn abc_round(
    previous: &Population,
    prior: &BoxPrior,
    distance: &dyn Discrepancy,
    cfg: &SmcConfig,
    round: usize,
) -> Result<Population> {
    let n = cfg.n_per_round;
    let m = kept_count(n, cfg.accept)?;
    let mut rng = seeded(derive_seed(derive_seed(cfg.seed, TAG_PROPOSE), round as u64));
    let thetas: Vec<Vec<f64>> = perturb(previous, prior, cfg.sigma, n, &mut rng)?
        .into_iter()
        .map(|p| p.theta)
        .collect();
    let dist = distance.distances(&thetas, &mut round_streams(cfg.seed, round, n))?;
    let (particles, distances, threshold) = keep(round, thetas, dist, m);
    let weights = compute_weights(&particles, previous, prior, cfg.sigma)?;
    Ok(Population {
        round,
        particles,
        weights,
        distances,
        threshold,
    })
}

/// All `cfg.rounds` populations, the first drawn from the prior.
pub fn run_smc_abc(prior: &BoxPrior, distance: &dyn Discrepancy, cfg: &SmcConfig) -> Result<Vec<Population>> {
    if cfg.rounds == 0 {
        return Err(CoreError::Config("at least one round is required".into()));
    }
    let mut pops = vec![abc_round0(prior, distance, cfg.n_per_round, cfg.accept, cfg.seed)?];
    for t in 1..cfg.rounds {
        let next = abc_round(pops.last().unwrap(), prior, distance, cfg, t)?;
        pops.push(next);
    }
    Ok(pops)
}
