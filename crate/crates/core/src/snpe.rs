//! Sequential neural posterior estimation with a conditional flow over
//! centromere positions given learned summaries.
//!
//! The first round fits the flow by maximum likelihood on prior draws.
//! Later rounds simulate from the current posterior estimate at the
//! reference and, by default, train with the atomic proposal correction:
//! each example is contrasted against `K - 1` parameters from the same
//! minibatch, which keeps the target at the true posterior.

use centro_nn::{Adam, AdamConfig, Graph, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flow::{ConditionalFlow, MafConfig};
use crate::genome::BoxPrior;
use crate::rng::{derive_seed, seeded, stream, SimRng};
use crate::smc_abc::simulate_all;
use crate::summary::SummaryNet;
use crate::task::{Observation, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correction {
    /// Atomic contrastive loss with this many atoms per example.
    Atomic { atoms: usize },
    /// Plain maximum likelihood on proposal draws.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpeTrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub val_frac: f64,
}

impl Default for NpeTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience: 20,
            lr: 5e-4,
            batch_size: 50,
            val_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpeReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub initial_loss: f64,
    pub best_epoch: usize,
}

/// Per-example internal coordinates, Jacobian term and standardized context.
struct Prepared {
    y: Vec<f64>,
    log_jac: f64,
    ctx: Vec<f64>,
}

fn prepare(flow: &ConditionalFlow, thetas: &[Vec<f64>], contexts: &[Vec<f64>]) -> Result<Vec<Prepared>> {
    thetas
        .iter()
        .zip(contexts)
        .map(|(t, c)| {
            let (y, log_jac) = flow
                .to_internal(t)
                .ok_or_else(|| CoreError::Training(format!("training parameter {t:?} lies on the support boundary")))?;
            let ctx = c
                .iter()
                .zip(flow.context_shift.iter().zip(&flow.context_scale))
                .map(|(v, (m, s))| (v - m) / s)
                .collect();
            Ok(Prepared { y, log_jac, ctx })
        })
        .collect()
}

/// Mean loss of one batch as a graph scalar. `atoms[b]` lists the indices
/// contrasted with example `b`, starting with `b` itself; a single atom
/// reduces to the negative log-likelihood.
fn batch_loss(
    flow: &ConditionalFlow,
    g: &mut Graph,
    items: &[Prepared],
    batch: &[usize],
    atoms: &[Vec<usize>],
) -> Result<centro_nn::Var> {
    let k = atoms[0].len();
    let mut ys = Vec::with_capacity(batch.len() * k);
    let mut cs = Vec::with_capacity(batch.len() * k);
    let mut jac = Vec::with_capacity(batch.len() * k);
    for (b, row) in batch.iter().zip(atoms) {
        for &a in row {
            ys.push(items[a].y.clone());
            cs.push(items[*b].ctx.clone());
            jac.push(items[a].log_jac);
        }
    }
    let y = g.constant(Tensor::from_rows(&ys)?);
    let c = if flow.context_dim > 0 {
        Some(g.constant(Tensor::from_rows(&cs)?))
    } else {
        None
    };
    let lp = flow.log_prob_graph(g, y, c)?;
    let n = batch.len();
    if k == 1 {
        let m = g.mean(lp);
        return Ok(g.scale(m, -1.0));
    }
    // The prior is uniform over the box, so only the Jacobian of the logit
    // map differs between atoms.
    let j = g.constant(Tensor::new(vec![n * k, 1], jac)?);
    let logits = g.add(lp, j)?;
    let logits = g.reshape(logits, vec![n, k])?;
    let lse = g.logsumexp(logits)?;
    let own = g.slice_cols(logits, 0, 1)?;
    let diff = g.sub(lse, own)?;
    Ok(g.mean(diff))
}

/// Contrast sets: each example followed by `atoms - 1` distinct others from
/// the batch.
fn draw_atoms(batch: &[usize], atoms: usize, rng: &mut SimRng) -> Vec<Vec<usize>> {
    let k = atoms.min(batch.len()).max(1);
    batch
        .iter()
        .map(|&b| {
            let others: Vec<usize> = batch.iter().copied().filter(|&o| o != b).collect();
            let mut row = vec![b];
            row.extend(others.choose_multiple(rng, k - 1).copied());
            row
        })
        .collect()
}

fn epoch_loss(
    flow: &ConditionalFlow,
    items: &[Prepared],
    idx: &[usize],
    cfg: &NpeTrainConfig,
    atoms: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in idx.chunks(cfg.batch_size.max(1)) {
        let a = draw_atoms(batch, atoms, rng);
        let mut g = Graph::new();
        let l = batch_loss(flow, &mut g, items, batch, &a)?;
        total += g.value(l).item() * batch.len() as f64;
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Fits `flow` to `(theta, context)` pairs with Adam and early stopping on
/// a held-out split; the best validation parameters are kept. `atoms = 1`
/// trains by maximum likelihood.
pub fn train_npe(
    flow: &mut ConditionalFlow,
    thetas: &[Vec<f64>],
    contexts: &[Vec<f64>],
    cfg: &NpeTrainConfig,
    atoms: usize,
    seed: u64,
) -> Result<NpeReport> {
    if thetas.is_empty() || thetas.len() != contexts.len() {
        return Err(CoreError::Config(format!(
            "{} parameters for {} contexts",
            thetas.len(),
            contexts.len()
        )));
    }
    let items = prepare(flow, thetas, contexts)?;
    let mut rng = seeded(seed);
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = if items.len() >= 10 {
        ((items.len() as f64 * cfg.val_frac).round() as usize).min(items.len() - 1)
    } else {
        0
    };
    let (val, train) = idx.split_at(n_val);
    let (val, mut train) = (val.to_vec(), train.to_vec());
    let eval_rng = seeded(derive_seed(seed, 1));
    let initial_loss = epoch_loss(flow, &items, &train, cfg, atoms, &mut eval_rng.clone())?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &flow.params,
    );
    let mut report = NpeReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        initial_loss,
        best_epoch: 0,
    };
    let mut best = (f64::INFINITY, flow.params.clone());
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        train.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, batch) in train.chunks(cfg.batch_size.max(1)).enumerate() {
            let a = draw_atoms(batch, atoms, &mut rng);
            let mut g = Graph::new();
            let loss = batch_loss(flow, &mut g, &items, batch, &a)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(CoreError::Training(format!(
                    "flow loss {lv} at epoch {epoch}, batch {bi}"
                )));
            }
            let grads = g.backward(loss)?;
            adam.step(&mut flow.params, &grads);
            sum += lv * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = sum / count.max(1) as f64;
        // Validation atoms are redrawn identically every epoch.
        let monitor = if val.is_empty() {
            train_loss
        } else {
            epoch_loss(flow, &items, &val, cfg, atoms, &mut eval_rng.clone())?
        };
        report.train_loss.push(train_loss);
        report.val_loss.push(monitor);
        if monitor < best.0 {
            best = (monitor, flow.params.clone());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    flow.params = best.1;
    log::info!(
        "flow trained: {} epochs, best validation loss {:.4} at epoch {}",
        report.train_loss.len(),
        best.0,
        report.best_epoch
    );
    Ok(report)
}

/// Draws from `flow` at `context`, rejecting points outside `prior`.
pub fn truncated_sample(
    flow: &ConditionalFlow,
    context: &[f64],
    prior: &BoxPrior,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n);
    let mut tried = 0usize;
    while out.len() < n {
        let want = (n - out.len()).max(16);
        let draws = flow.sample(context, want, rng)?;
        tried += draws.len();
        out.extend(draws.into_iter().filter(|t| prior.contains(t)));
        if tried >= 10_000 && (out.len() as f64) < 1e-3 * tried as f64 {
            return Err(CoreError::Runtime(format!(
                "posterior escaped the prior support: {} of {tried} draws accepted",
                out.len()
            )));
        }
    }
    out.truncate(n);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnpeConfig {
    pub rounds: usize,
    pub n_per_round: usize,
    pub flow: MafConfig,
    pub train: NpeTrainConfig,
    pub correction: Correction,
    /// Train each round on the simulations of all rounds so far.
    pub reuse_rounds: bool,
    /// Posterior draws reported per round.
    pub n_posterior: usize,
    pub seed: u64,
}

impl SnpeConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            rounds: 11,
            n_per_round: 1000,
            flow: MafConfig::default(),
            train: NpeTrainConfig::default(),
            correction: Correction::Atomic { atoms: 10 },
            reuse_rounds: true,
            n_posterior: 1000,
            seed,
        }
    }
}

/// Posterior approximation after one round.
#[derive(Clone, Debug)]
pub struct PosteriorEstimate {
    pub round: usize,
    pub flow: ConditionalFlow,
    /// Raw summary of the reference observation.
    pub context: Vec<f64>,
    pub prior: BoxPrior,
    pub samples: Vec<Vec<f64>>,
    pub report: NpeReport,
}

pub fn posterior_sample(est: &PosteriorEstimate, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    truncated_sample(&est.flow, &est.context, &est.prior, n, rng)
}

const TAG_THETA: u64 = 0x534e_5045_0001;
const TAG_SIM: u64 = 0x534e_5045_0002;
const TAG_TRAIN: u64 = 0x534e_5045_0003;
const TAG_POST: u64 = 0x534e_5045_0004;

/// Summaries of simulations at `thetas`, drawn from per-index streams.
pub fn simulate_summaries(task: &Task, net: &SummaryNet, thetas: &[Vec<f64>], seed: u64) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(thetas.len());
    for (c, chunk) in thetas.chunks(CHUNK).enumerate() {
        let mut rngs: Vec<SimRng> = (0..chunk.len())
            .map(|k| stream(seed, TAG_SIM, (c * CHUNK + k) as u64))
            .collect();
        let obs = simulate_all(task, chunk, &mut rngs)?;
        out.extend(net.summarize_batch(&obs)?);
    }
    Ok(out)
}

/// Runs all rounds and returns one posterior estimate per round.
pub fn run_snpe(
    task: &Task,
    net: &SummaryNet,
    reference: &Observation,
    cfg: &SnpeConfig,
) -> Result<Vec<PosteriorEstimate>> {
    if cfg.rounds == 0 || cfg.n_per_round == 0 {
        return Err(CoreError::Config(
            "SNPE needs at least one round and one simulation".into(),
        ));
    }
    let prior = task.prior();
    let context = net.summarize(reference)?;
    let mut flow = ConditionalFlow::new(
        task.dim(),
        context.len(),
        cfg.flow.clone(),
        Some(prior.clone()),
        derive_seed(cfg.seed, TAG_TRAIN),
    )?;
    let mut all_theta: Vec<Vec<f64>> = Vec::new();
    let mut all_ctx: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let round_seed = derive_seed(cfg.seed, round as u64);
        let mut rng = seeded(derive_seed(round_seed, TAG_THETA));
        let thetas = if round == 0 {
            (0..cfg.n_per_round).map(|_| prior.sample(&mut rng)).collect()
        } else {
            truncated_sample(&flow, &context, &prior, cfg.n_per_round, &mut rng)?
        };
        let ctx = simulate_summaries(task, net, &thetas, round_seed)?;
        if round == 0 {
            flow.fit_context(&ctx);
        }
        let (train_theta, train_ctx) = if cfg.reuse_rounds {
            all_theta.extend(thetas);
            all_ctx.extend(ctx);
            (all_theta.clone(), all_ctx.clone())
        } else {
            (thetas, ctx)
        };
        let atoms = match (round, cfg.correction) {
            (0, _) | (_, Correction::None) => 1,
            (_, Correction::Atomic { atoms }) => atoms,
        };
        let report = train_npe(
            &mut flow,
            &train_theta,
            &train_ctx,
            &cfg.train,
            atoms,
            derive_seed(round_seed, TAG_TRAIN),
        )?;
        let samples = truncated_sample(
            &flow,
            &context,
            &prior,
            cfg.n_posterior,
            &mut seeded(derive_seed(round_seed, TAG_POST)),
        )?;
        log::info!("SNPE round {round}: trained on {} simulations", train_theta.len());
        out.push(PosteriorEstimate {
            round,
            flow: flow.clone(),
            context: context.clone(),
            prior: prior.clone(),
            samples,
            report,
        });
    }
    Ok(out)
}
