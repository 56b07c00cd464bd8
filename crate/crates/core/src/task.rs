//! Inference targets: the whole centromere vector from a full map, or one
//! chromosome's centromere from its line of blocks.

use serde::{Deserialize, Serialize};

use crate::contact::{BlockRow, ContactMap};
use crate::error::{CoreError, Result};
use crate::genome::{BoxPrior, GenomeSpec};
use crate::rng::SimRng;
use crate::simulator::{simulate_block_row, simulate_map};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "chrom")]
pub enum Target {
    /// All `L` centromeres from the full map.
    Joint,
    /// Centromere of one chromosome from its block row.
    Chromosome(usize),
}

/// A simulated or observed data set.
#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    Map(ContactMap),
    Row(BlockRow),
}

/// Prior and simulator for one inference target.
#[derive(Clone, Debug)]
pub struct Task {
    pub genome: GenomeSpec,
    pub target: Target,
}

impl Task {
    pub fn new(genome: GenomeSpec, target: Target) -> Result<Self> {
        if let Target::Chromosome(i) = target {
            if i >= genome.num_chromosomes() {
                return Err(CoreError::Config(format!("chromosome index {i} out of range")));
            }
        }
        Ok(Self { genome, target })
    }

    pub fn dim(&self) -> usize {
        match self.target {
            Target::Joint => self.genome.num_chromosomes(),
            Target::Chromosome(_) => 1,
        }
    }

    pub fn prior(&self) -> BoxPrior {
        match self.target {
            Target::Joint => self.genome.prior(),
            Target::Chromosome(i) => self.genome.chromosome_prior(i),
        }
    }

    /// Lengths (bp) of the chromosomes indexed by the parameter vector.
    pub fn lengths(&self) -> Vec<f64> {
        match self.target {
            Target::Joint => (0..self.genome.num_chromosomes())
                .map(|i| self.genome.length(i) as f64)
                .collect(),
            Target::Chromosome(i) => vec![self.genome.length(i) as f64],
        }
    }

    pub fn simulate(&self, theta: &[f64], rng: &mut SimRng) -> Result<Observation> {
        match self.target {
            Target::Joint => Ok(Observation::Map(simulate_map(&self.genome, theta, rng)?)),
            Target::Chromosome(i) => {
                if theta.len() != 1 {
                    return Err(CoreError::Domain(format!(
                        "chromosome target takes one parameter, got {}",
                        theta.len()
                    )));
                }
                Ok(Observation::Row(simulate_block_row(&self.genome, i, theta[0], rng)?))
            }
        }
    }

    /// The part of a full reference map this task observes.
    pub fn observe(&self, map: &ContactMap) -> Result<Observation> {
        if map.genome() != &self.genome {
            return Err(CoreError::Geometry("reference map built on another genome".into()));
        }
        Ok(match self.target {
            Target::Joint => Observation::Map(map.clone()),
            Target::Chromosome(i) => Observation::Row(map.block_row(i)),
        })
    }

    /// Restriction of a full centromere vector to this task's parameters.
    pub fn project(&self, theta: &[f64]) -> Vec<f64> {
        match self.target {
            Target::Joint => theta.to_vec(),
            Target::Chromosome(i) => vec![theta[i]],
        }
    }
}
