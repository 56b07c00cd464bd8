//! Learned summary statistics: a CNN trunk followed by MLP heads, trained to
//! regress centromere positions from contact data.
//!
//! Joint mode reads the upper-triangular assembly of all trans blocks and
//! predicts every centromere. Per-chromosome mode runs one shared trunk on
//! each block of a line of blocks, averages the trunk features over the
//! `L - 1` blocks and feeds them to a head specific to the chromosome.
//!
//! Blocks are divided by their own maximum before entering the network and
//! targets are positions divided by chromosome length.

use std::path::Path;

use centro_nn::{Adam, AdamConfig, Checkpoint, Conv2d, Dense, Graph, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::{Block, BlockRow, ContactMap};
use crate::error::{CoreError, Result};
use crate::genome::GenomeSpec;
use crate::rng::{seeded, stream, SimRng};
use crate::task::{Observation, Target, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SummaryMode {
    Joint,
    PerChromosome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryArch {
    pub channels: [usize; 2],
    pub kernel: usize,
    pub stride: usize,
    pub hidden: usize,
}

impl SummaryArch {
    pub fn joint_default() -> Self {
        Self {
            channels: [8, 16],
            kernel: 3,
            stride: 2,
            hidden: 128,
        }
    }

    pub fn per_chromosome_default() -> Self {
        Self {
            channels: [4, 8],
            kernel: 3,
            stride: 2,
            hidden: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Head {
    hidden: Dense,
    out: Dense,
}

/// CNN + MLP regressor of centromere positions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryNet {
    pub mode: SummaryMode,
    pub genome: GenomeSpec,
    pub arch: SummaryArch,
    /// Side of the square network input.
    pub input_side: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    heads: Vec<Head>,
    pub seed: u64,
    #[serde(skip)]
    pub params: ParamSet,
}

/// Rows and columns of the joint assembly: chromosomes `0..L-1` on rows,
/// `1..L` on columns.
fn joint_extent(g: &GenomeSpec) -> (usize, usize) {
    let l = g.num_chromosomes();
    let rows = (0..l - 1).map(|i| g.bins(i)).sum();
    let cols = (1..l).map(|j| g.bins(j)).sum();
    (rows, cols)
}

impl SummaryNet {
    pub fn new(genome: &GenomeSpec, mode: SummaryMode, arch: SummaryArch, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let mut params = ParamSet::new();
        let input_side = match mode {
            SummaryMode::Joint => {
                let (r, c) = joint_extent(genome);
                r.max(c)
            }
            SummaryMode::PerChromosome => genome.max_bins(),
        };
        let [c1, c2] = arch.channels;
        let conv1 = Conv2d::new(&mut params, "conv1", 1, c1, arch.kernel, arch.stride, &mut rng);
        if input_side < arch.kernel {
            return Err(CoreError::Config(format!(
                "input of side {input_side} smaller than the kernel"
            )));
        }
        let (h1, w1) = conv1.output_size(input_side, input_side);
        if h1 < arch.kernel {
            return Err(CoreError::Config(format!(
                "input of side {input_side} too small for two convolutions"
            )));
        }
        let conv2 = Conv2d::new(&mut params, "conv2", c1, c2, arch.kernel, arch.stride, &mut rng);
        let (h2, w2) = conv2.output_size(h1, w1);
        let flat = c2 * h2 * w2;
        let l = genome.num_chromosomes();
        let (n_heads, out_dim) = match mode {
            SummaryMode::Joint => (1, l),
            SummaryMode::PerChromosome => (l, 1),
        };
        let heads = (0..n_heads)
            .map(|k| Head {
                hidden: Dense::new(&mut params, &format!("head{k}.hidden"), flat, arch.hidden, &mut rng),
                out: Dense::new(&mut params, &format!("head{k}.out"), arch.hidden, out_dim, &mut rng),
            })
            .collect();
        Ok(Self {
            mode,
            genome: genome.clone(),
            arch,
            input_side,
            conv1,
            conv2,
            heads,
            seed,
            params,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_shapes(&self, k: usize) -> Vec<Vec<usize>> {
        let h = &self.heads[k];
        [h.hidden.w, h.hidden.b, h.out.w, h.out.b]
            .iter()
            .map(|id| self.params.get(*id).shape().to_vec())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Output dimension for a given task target.
    pub fn output_dim(&self) -> usize {
        match self.mode {
            SummaryMode::Joint => self.genome.num_chromosomes(),
            SummaryMode::PerChromosome => 1,
        }
    }

    fn trunk(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, &self.params, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, &self.params, h)?;
        let h = g.relu(h);
        Ok(g.flatten(h)?)
    }

    fn head(&self, g: &mut Graph, k: usize, x: Var) -> Result<Var> {
        let h = self.heads[k].hidden.forward(g, &self.params, x)?;
        let h = g.relu(h);
        Ok(self.heads[k].out.forward(g, &self.params, h)?)
    }

    /// Scaled predictions `[B, out]` for a batch of preprocessed inputs.
    /// Per-chromosome batches must all belong to chromosome `chrom`.
    fn forward(&self, g: &mut Graph, inputs: &[Vec<f64>], chrom: usize) -> Result<Var> {
        let s = self.input_side;
        let b = inputs.len();
        let per = match self.mode {
            SummaryMode::Joint => 1,
            SummaryMode::PerChromosome => self.genome.num_chromosomes() - 1,
        };
        let data: Vec<f64> = inputs.iter().flat_map(|v| v.iter().copied()).collect();
        let t = Tensor::new(vec![b * per, 1, s, s], data)?;
        let x = g.constant(t);
        let feats = self.trunk(g, x)?;
        match self.mode {
            SummaryMode::Joint => self.head(g, 0, feats),
            SummaryMode::PerChromosome => {
                let pooled = g.group_mean(feats, per)?;
                self.head(g, chrom, pooled)
            }
        }
    }

    /// Network input for a full map (joint mode).
    pub fn joint_input(&self, map: &ContactMap) -> Result<Vec<f64>> {
        if self.mode != SummaryMode::Joint {
            return Err(CoreError::Config(
                "joint input requested from a per-chromosome net".into(),
            ));
        }
        if map.genome() != &self.genome {
            return Err(CoreError::Geometry(
                "map genome differs from the training genome".into(),
            ));
        }
        let g = &self.genome;
        let s = self.input_side;
        let mut out = vec![0.0; s * s];
        let col0 = g.bins(0);
        for ((i, j), b) in g.pairs().zip(map.blocks()) {
            let (r0, c0) = (g.bin_offset(i), g.bin_offset(j) - col0);
            paste(&mut out, s, r0, c0, &b.max_normalized());
        }
        Ok(out)
    }

    /// Network input for a line of blocks: `L - 1` zero-padded squares.
    pub fn row_input(&self, row: &BlockRow) -> Result<Vec<f64>> {
        if self.mode != SummaryMode::PerChromosome {
            return Err(CoreError::Config("block-row input requested from a joint net".into()));
        }
        row.check_geometry(&self.genome)?;
        let s = self.input_side;
        let mut out = vec![0.0; row.blocks.len() * s * s];
        for (k, b) in row.blocks.iter().enumerate() {
            paste(&mut out[k * s * s..(k + 1) * s * s], s, 0, 0, &b.max_normalized());
        }
        Ok(out)
    }

    /// Preprocessed input and the chromosome whose head applies.
    pub fn input(&self, obs: &Observation) -> Result<(Vec<f64>, usize)> {
        match obs {
            Observation::Map(m) => Ok((self.joint_input(m)?, 0)),
            Observation::Row(r) => Ok((self.row_input(r)?, r.chrom)),
        }
    }

    fn lengths(&self, chrom: usize) -> Vec<f64> {
        match self.mode {
            SummaryMode::Joint => (0..self.genome.num_chromosomes())
                .map(|i| self.genome.length(i) as f64)
                .collect(),
            SummaryMode::PerChromosome => vec![self.genome.length(chrom) as f64],
        }
    }

    /// Scaled predictions for inputs of one chromosome, in chunks.
    fn predict_scaled(&self, inputs: &[Vec<f64>], chrom: usize) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(CHUNK) {
            let mut g = Graph::new();
            let y = self.forward(&mut g, chunk, chrom)?;
            let t = g.value(y);
            let d = t.shape()[1];
            out.extend(t.data().chunks_exact(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Summaries in bp of a batch of observations.
    pub fn summarize_batch(&self, obs: &[Observation]) -> Result<Vec<Vec<f64>>> {
        let prepared = obs.par_iter().map(|o| self.input(o)).collect::<Result<Vec<_>>>()?;
        let mut out = vec![Vec::new(); obs.len()];
        // Group by head so every forward batch uses a single chromosome.
        let mut order: Vec<usize> = (0..obs.len()).collect();
        order.sort_by_key(|&k| prepared[k].1);
        for group in order.chunk_by(|a, b| prepared[*a].1 == prepared[*b].1) {
            let chrom = prepared[group[0]].1;
            let inputs: Vec<Vec<f64>> = group.iter().map(|&k| prepared[k].0.clone()).collect();
            let lens = self.lengths(chrom);
            for (&k, y) in group.iter().zip(self.predict_scaled(&inputs, chrom)?) {
                out[k] = y.iter().zip(&lens).map(|(v, l)| v * l).collect();
            }
        }
        Ok(out)
    }

    pub fn summarize(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.summarize_batch(std::slice::from_ref(obs))?.remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arch = serde_json::to_value(self)?;
        Checkpoint::save(path, arch, self.seed, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ck, params) = Checkpoint::load(path).map_err(|e| CoreError::Load {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut net: SummaryNet = serde_json::from_value(ck.architecture)?;
        let fresh = SummaryNet::new(&net.genome, net.mode, net.arch.clone(), net.seed)?;
        if fresh.params.shapes() != params.shapes() {
            return Err(CoreError::Load {
                path: path.to_path_buf(),
                detail: "parameter shapes do not match the stored architecture".into(),
            });
        }
        net.params = params;
        Ok(net)
    }
}

fn paste(dst: &mut [f64], side: usize, r0: usize, c0: usize, b: &Block) {
    for r in 0..b.rows() {
        let d = (r0 + r) * side + c0;
        dst[d..d + b.cols()].copy_from_slice(b.row(r));
    }
}

/// One training example: a parameter draw and the stream that simulates its
/// observation. Observations are regenerated on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub target: Target,
    pub theta: Vec<f64>,
    pub stream: u64,
}

/// Parameter draws with reproducible simulations.
#[derive(Clone, Debug)]
pub struct SummaryDataset {
    pub genome: GenomeSpec,
    pub seed: u64,
    pub examples: Vec<Example>,
}

const TAG_DATA_THETA: u64 = 0x5354_4154_0001;
const TAG_DATA_SIM: u64 = 0x5354_4154_0002;

impl SummaryDataset {
    /// `n` prior draws; in per-chromosome mode example `k` targets
    /// chromosome `k mod L`.
    pub fn from_prior(genome: &GenomeSpec, mode: SummaryMode, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(CoreError::Config("summary dataset needs at least one example".into()));
        }
        let l = genome.num_chromosomes();
        let examples = (0..n)
            .map(|k| {
                let target = match mode {
                    SummaryMode::Joint => Target::Joint,
                    SummaryMode::PerChromosome => Target::Chromosome(k % l),
                };
                let task = Task::new(genome.clone(), target)?;
                let theta = task.prior().sample(&mut stream(seed, TAG_DATA_THETA, k as u64));
                Ok(Example {
                    target,
                    theta,
                    stream: k as u64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            genome: genome.clone(),
            seed,
            examples,
        })
    }

    /// Dataset with explicit parameters for every example.
    pub fn from_thetas(genome: &GenomeSpec, target: Target, thetas: Vec<Vec<f64>>, seed: u64) -> Self {
        Self {
            genome: genome.clone(),
            seed,
            examples: thetas
                .into_iter()
                .enumerate()
                .map(|(k, theta)| Example {
                    target,
                    theta,
                    stream: k as u64,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sim_rng(&self, e: &Example) -> SimRng {
        stream(self.seed, TAG_DATA_SIM, e.stream)
    }

    pub fn observation(&self, e: &Example) -> Result<Observation> {
        Task::new(self.genome.clone(), e.target)?.simulate(&e.theta, &mut self.sim_rng(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryTrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SummaryTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            patience: 20,
            lr: 5e-4,
            batch_size: 32,
            val_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Training-set loss before the first update.
    pub initial_loss: f64,
    pub best_epoch: usize,
}

/// A preprocessed example: network input, head index and scaled target.
struct Prepared {
    input: Vec<f64>,
    chrom: usize,
    target: Vec<f64>,
}

fn prepare(net: &SummaryNet, data: &SummaryDataset, idx: &[usize]) -> Result<Vec<Prepared>> {
    idx.par_iter()
        .map(|&k| {
            let e = &data.examples[k];
            let (input, chrom) = net.input(&data.observation(e)?)?;
            let lens = net.lengths(chrom);
            let target = e.theta.iter().zip(&lens).map(|(t, l)| t / l).collect();
            Ok(Prepared { input, chrom, target })
        })
        .collect()
}

fn check_mode(net: &SummaryNet, data: &SummaryDataset) -> Result<()> {
    if data.genome != net.genome {
        return Err(CoreError::Geometry("dataset genome differs from the net genome".into()));
    }
    let ok = data.examples.iter().all(|e| {
        matches!(
            (net.mode, e.target),
            (SummaryMode::Joint, Target::Joint) | (SummaryMode::PerChromosome, Target::Chromosome(_))
        )
    });
    if !ok {
        return Err(CoreError::Config("dataset targets do not match the net mode".into()));
    }
    Ok(())
}

/// Batches of one head each; order fixed by `rng`.
fn batches(items: &[Prepared], batch: usize, rng: &mut SimRng) -> Vec<Vec<usize>> {
    let mut by_head: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (k, p) in items.iter().enumerate() {
        by_head.entry(p.chrom).or_default().push(k);
    }
    let mut out = Vec::new();
    for idx in by_head.values_mut() {
        idx.shuffle(rng);
        out.extend(idx.chunks(batch).map(<[usize]>::to_vec));
    }
    out.shuffle(rng);
    out
}

fn batch_loss(net: &SummaryNet, items: &[&Prepared], g: &mut Graph) -> Result<Var> {
    let inputs: Vec<Vec<f64>> = items.iter().map(|p| p.input.clone()).collect();
    let y = net.forward(g, &inputs, items[0].chrom)?;
    let targets: Vec<&[f64]> = items.iter().map(|p| p.target.as_slice()).collect();
    let t = g.constant(Tensor::from_rows(&targets)?);
    Ok(g.mse(y, t)?)
}

/// Mean over examples of the squared error in scaled units.
fn mean_loss(net: &SummaryNet, items: &[Prepared]) -> Result<f64> {
    if items.is_empty() {
        return Ok(f64::NAN);
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by_key(|&k| items[k].chrom);
    let mut total = 0.0;
    for group in idx.chunk_by(|a, b| items[*a].chrom == items[*b].chrom) {
        for chunk in group.chunks(64) {
            let refs: Vec<&Prepared> = chunk.iter().map(|&k| &items[k]).collect();
            let mut g = Graph::new();
            let l = batch_loss(net, &refs, &mut g)?;
            total += g.value(l).item() * chunk.len() as f64;
        }
    }
    Ok(total / items.len() as f64)
}

/// Empirical regression loss `(1/N) sum |S(C_n) - theta_n|^2` in scaled units.
pub fn dataset_loss(net: &SummaryNet, data: &SummaryDataset) -> Result<f64> {
    check_mode(net, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    mean_loss(net, &prepare(net, data, &idx)?)
}

/// Trains `net` with Adam on a held-out split, keeping the parameters of
/// the best validation epoch.
pub fn train_summary(net: &mut SummaryNet, data: &SummaryDataset, cfg: &SummaryTrainConfig) -> Result<TrainReport> {
    check_mode(net, data)?;
    if data.is_empty() {
        return Err(CoreError::Config("empty training set".into()));
    }
    let mut rng = seeded(cfg.seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = if data.len() >= 10 {
        ((data.len() as f64 * cfg.val_frac).round() as usize).min(data.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = idx.split_at(n_val);
    let train = prepare(net, data, train_idx)?;
    let val = prepare(net, data, val_idx)?;
    let initial_loss = mean_loss(net, &train)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &net.params,
    );
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        initial_loss,
        best_epoch: 0,
    };
    let mut best = (f64::INFINITY, net.params.clone());
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, batch) in batches(&train, cfg.batch_size.max(1), &mut rng).iter().enumerate() {
            let refs: Vec<&Prepared> = batch.iter().map(|&k| &train[k]).collect();
            let mut g = Graph::new();
            let loss = batch_loss(net, &refs, &mut g)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(CoreError::Training(format!(
                    "summary loss {lv} at epoch {epoch}, batch {bi} (head {})",
                    refs[0].chrom
                )));
            }
            let grads = g.backward(loss)?;
            adam.step(&mut net.params, &grads);
            sum += lv * refs.len() as f64;
            count += refs.len();
        }
        let train_loss = sum / count as f64;
        let monitor = if val.is_empty() {
            train_loss
        } else {
            mean_loss(net, &val)?
        };
        report.train_loss.push(train_loss);
        report.val_loss.push(monitor);
        log::debug!("summary epoch {epoch}: train {train_loss:.5} val {monitor:.5}");
        if monitor < best.0 {
            best = (monitor, net.params.clone());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    net.params = best.1;
    log::info!(
        "summary net trained: {} epochs, best validation loss {:.5} at epoch {}",
        report.train_loss.len(),
        best.0,
        report.best_epoch
    );
    Ok(report)
}
